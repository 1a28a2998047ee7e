"""Synthetic long-tail e-commerce corpus.

Items and users live in one Gaussian-mixture latent space.  Item popularity
and user activity are Zipf-distributed, exposures mix popularity with
user-item affinity, and clicks follow a logistic model of affinity,
popularity and a per-item quality offset.  Latents, categories and quality
are ground truth for diagnostics only; the model side never reads them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_VERSION = "synthdata/1"
DAY = 86_400


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


class EmptyLabelsError(ValueError):
    pass


class IngestError(ValueError):
    """A dataset file is missing or malformed."""


@dataclass
class ItemCatalog:
    item_id: np.ndarray
    latent: np.ndarray
    content_rep: np.ndarray
    popularity: np.ndarray
    category: np.ndarray
    attrs: np.ndarray
    quality: np.ndarray
    centers: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.item_id)


@dataclass
class UserTable:
    user_id: np.ndarray
    latent: np.ndarray
    activity: np.ndarray
    category: np.ndarray
    profile: np.ndarray
    history: list[list[tuple[int, int]]]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user_id)


@dataclass
class EventLog:
    user: np.ndarray
    item: np.ndarray
    timestamp: np.ndarray
    label: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user)

    def subset(self, mask) -> "EventLog":
        return EventLog(self.user[mask], self.item[mask], self.timestamp[mask],
                        self.label[mask], dict(self.meta))

    @property
    def day(self) -> np.ndarray:
        return self.timestamp // DAY


@dataclass(frozen=True)
class ClickModel:
    """logit = affinity * <u, i> + pop_bias * z(log pop) + quality * q_i + offset"""

    affinity: float = 4.0
    pop_bias: float = 0.6
    offset: float = -3.2
    quality: float = 1.0
    exposure_affinity: float = 2.0


@dataclass
class ActivityLabels:
    user_tail: np.ndarray
    item_tail: np.ndarray
    user_clicks: np.ndarray
    user_exposures: np.ndarray
    item_exposures: np.ndarray
    item_clicks: np.ndarray
    user_act: np.ndarray
    item_act: np.ndarray
    user_threshold: int = 5
    item_threshold: int = 10

    def long_tail(self, users, items) -> np.ndarray:
        return self.user_tail[np.asarray(users)] | self.item_tail[np.asarray(items)]

    def head(self, users, items) -> np.ndarray:
        return ~self.long_tail(users, items)


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def _mixture(rng, centers, n, spread):
    k, dim = centers.shape
    cat = rng.integers(0, k, size=n)
    pts = centers[cat] + rng.normal(0.0, spread / np.sqrt(dim), size=(n, dim))
    return pts, cat


def generate_catalog(num_items: int, num_categories: int, dim: int = 16, zipf_s: float = 1.1,
                     noise_sigma: float = 0.05, seed: int = 0, *, attr_dim: int = 4,
                     spread: float = 0.6, quality_sigma: float = 0.6) -> ItemCatalog:
    if num_items < 1 or num_categories < 1 or num_items < num_categories or dim < 1:
        raise ConfigError(f"invalid catalog sizes: items={num_items} categories={num_categories} dim={dim}")
    if zipf_s <= 0:
        raise ConfigError(f"zipf exponent must be positive, got {zipf_s}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_categories, dim))
    latent, cat = _mixture(rng, centers, num_items, spread)
    rank = rng.permutation(num_items)
    popularity = zipf_weights(num_items, zipf_s)[rank]
    content = latent + rng.normal(0.0, 1.0, size=latent.shape) * noise_sigma
    quality = rng.normal(0.0, quality_sigma, size=num_items)
    attrs = rng.normal(size=(num_items, attr_dim))
    if attr_dim:
        # one noisy attribute carries the quality signal, the rest are inert
        attrs[:, 0] = quality / max(quality_sigma, 1e-12) + rng.normal(0.0, 1.0, size=num_items)
    return ItemCatalog(np.arange(num_items), latent, content, popularity, cat, attrs, quality,
                       centers, {"generator_version": GENERATOR_VERSION, "seed": seed})


def generate_users(num_users: int, dim: int = 16, zipf_s_user: float = 1.1, seed: int = 0, *,
                   centers: np.ndarray | None = None, profile_dim: int = 4,
                   spread: float = 0.6, profile_noise: float = 0.5) -> UserTable:
    if num_users < 1 or dim < 1:
        raise ConfigError(f"invalid user sizes: users={num_users} dim={dim}")
    if zipf_s_user <= 0:
        raise ConfigError(f"zipf exponent must be positive, got {zipf_s_user}")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = np.zeros((1, dim))
    if centers.shape[1] != dim:
        raise ConfigError(f"mixture centers have dim {centers.shape[1]}, expected {dim}")
    latent, cat = _mixture(rng, centers, num_users, spread)
    activity = zipf_weights(num_users, zipf_s_user)[rng.permutation(num_users)]
    proj = rng.normal(0.0, 1.0, size=(dim, profile_dim))
    profile = latent @ proj + rng.normal(0.0, profile_noise, size=(num_users, profile_dim))
    return UserTable(np.arange(num_users), latent, activity, cat, profile,
                     [[] for _ in range(num_users)],
                     {"generator_version": GENERATOR_VERSION, "seed": seed})


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_interactions(catalog: ItemCatalog, users: UserTable, num_events: int,
                          click_model: ClickModel = ClickModel(), seed: int = 0,
                          num_days: int = 10) -> EventLog:
    """Sample exposures and clicks; fills ``users.history`` with clicked items."""
    if num_events <= 0:
        raise ConfigError(f"num_events must be positive, got {num_events}")
    if len(catalog) == 0 or len(users) == 0:
        raise ConfigError("catalog and users must be non-empty")
    if num_days < 1 or num_days * DAY < num_events:
        raise ConfigError("not enough distinct timestamps for the requested events")
    rng = np.random.default_rng(seed)
    ev_user = rng.choice(len(users), size=num_events, p=users.activity)
    ts = np.sort(rng.choice(num_days * DAY, size=num_events, replace=False)).astype(np.int64)

    log_pop = np.log(catalog.popularity)
    ev_item = np.empty(num_events, dtype=np.int64)
    order = np.argsort(ev_user, kind="stable")
    bounds = np.searchsorted(ev_user[order], np.arange(len(users) + 1))
    for u in range(len(users)):
        idx = order[bounds[u]:bounds[u + 1]]
        if idx.size == 0:
            continue
        logits = log_pop + click_model.exposure_affinity * (catalog.latent @ users.latent[u])
        p = np.exp(logits - logits.max())
        ev_item[idx] = rng.choice(len(catalog), size=idx.size, p=p / p.sum())

    # popularity bias is z-scored over the catalog and centred on the exposed items
    std = log_pop.std()
    pop_z = (log_pop - log_pop[ev_item].mean()) / std if std > 0 else np.zeros_like(log_pop)
    affinity = np.einsum("ij,ij->i", users.latent[ev_user], catalog.latent[ev_item])
    logit = (click_model.affinity * affinity + click_model.pop_bias * pop_z[ev_item]
             + click_model.quality * catalog.quality[ev_item] + click_model.offset)
    label = (rng.random(num_events) < _sigmoid(logit)).astype(np.int64)

    for u, i, t in zip(ev_user[label == 1], ev_item[label == 1], ts[label == 1]):
        users.history[u].append((int(i), int(t)))
    return EventLog(ev_user.astype(np.int64), ev_item, ts, label,
                    {"generator_version": GENERATOR_VERSION, "seed": seed})


def label_head_tail(events: EventLog, num_users: int, num_items: int, user_threshold: int = 5,
                    item_threshold: int = 10) -> ActivityLabels:
    """Head/tail flags and activity features from training events.

    A user is tail with fewer than ``user_threshold`` clicks, an item with
    fewer than ``item_threshold`` exposures.  Activity features are
    ``[log1p(exposures), log1p(distinct partners), recency]`` where recency is
    days since the last event bucketed to 0..3 and scaled to [0, 1]
    (1.0 when the entity has no events).  They never use click labels.
    """
    if len(events) == 0:
        raise EmptyLabelsError("cannot label an empty event set")
    u_clicks = np.bincount(events.user, weights=events.label, minlength=num_users).astype(np.int64)
    u_exp = np.bincount(events.user, minlength=num_users)
    i_exp = np.bincount(events.item, minlength=num_items)
    i_clicks = np.bincount(events.item, weights=events.label, minlength=num_items).astype(np.int64)

    pairs = np.unique(np.stack([events.user, events.item], axis=1), axis=0)
    u_partners = np.bincount(pairs[:, 0], minlength=num_users)
    i_partners = np.bincount(pairs[:, 1], minlength=num_items)

    last_day = int(events.day.max())

    def recency(ids, n):
        last = np.full(n, -1, dtype=np.int64)
        np.maximum.at(last, ids, events.day)
        gap = np.where(last >= 0, np.minimum(last_day - last, 3) / 3.0, 1.0)
        return gap

    user_act = np.stack([np.log1p(u_exp), np.log1p(u_partners),
                         recency(events.user, num_users)], axis=1)
    item_act = np.stack([np.log1p(i_exp), np.log1p(i_partners),
                         recency(events.item, num_items)], axis=1)
    return ActivityLabels(u_clicks < user_threshold, i_exp < item_threshold, u_clicks, u_exp,
                          i_exp, i_clicks, user_act, item_act, user_threshold, item_threshold)


def time_split(events: EventLog, test_days: int) -> tuple[EventLog, EventLog]:
    """Split off the last ``test_days`` calendar days; boundary events go to test."""
    if len(events) == 0:
        raise SplitError("no events to split")
    if np.any(np.diff(events.timestamp) < 0):
        raise SplitError("events must be time-ordered")
    boundary = (int(events.day.max()) + 1 - test_days) * DAY
    is_test = events.timestamp >= boundary
    train, test = events.subset(~is_test), events.subset(is_test)
    if len(train) == 0 or len(test) == 0:
        raise SplitError(f"split at t={boundary} leaves train={len(train)} test={len(test)}")
    return train, test


def click_sequences(events: EventLog) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clicked (user, item, timestamp) sorted by user then time."""
    clicked = events.label == 1
    u, i, t = events.user[clicked], events.item[clicked], events.timestamp[clicked]
    order = np.lexsort((t, u))
    return u[order], i[order], t[order]


def extract_cooccurrence(events: EventLog, window: int = 3, min_count: int = 1) -> np.ndarray:
    """Item pairs clicked by one user within ``window`` consecutive clicks.

    Returns an int array of rows ``(i1, i2, count)`` with ``i1 < i2``, sorted.
    """
    if window < 1:
        raise ConfigError("window must be >= 1")
    u, i, _ = click_sequences(events)
    firsts, seconds = [], []
    for k in range(1, window + 1):
        same = u[:-k] == u[k:]
        firsts.append(i[:-k][same])
        seconds.append(i[k:][same])
    a = np.concatenate(firsts) if firsts else np.zeros(0, dtype=np.int64)
    b = np.concatenate(seconds) if seconds else np.zeros(0, dtype=np.int64)
    keep = a != b
    lo, hi = np.minimum(a, b)[keep], np.maximum(a, b)[keep]
    if lo.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    pairs, counts = np.unique(np.stack([lo, hi], axis=1), axis=0, return_counts=True)
    sel = counts >= min_count
    return np.concatenate([pairs[sel], counts[sel, None]], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# serialization


def _meta_line(kind: str, meta: dict) -> str:
    return json.dumps({"meta": {"kind": kind, **meta}}, sort_keys=True)


def _read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    if not path.exists():
        raise IngestError(f"missing dataset file {path}")
    lines = path.read_text().splitlines()
    if not lines or "meta" not in json.loads(lines[0]):
        raise IngestError(f"{path} lacks a meta header line")
    return json.loads(lines[0])["meta"], [json.loads(line) for line in lines[1:] if line]


def write_items(path: Path, catalog: ItemCatalog) -> None:
    with open(path, "w") as fh:
        fh.write(_meta_line("items", {**catalog.meta, "centers": catalog.centers.tolist()}) + "\n")
        for k in range(len(catalog)):
            fh.write(json.dumps({
                "item_id": int(catalog.item_id[k]),
                "category": int(catalog.category[k]),
                "popularity": float(catalog.popularity[k]),
                "quality": float(catalog.quality[k]),
                "latent": catalog.latent[k].tolist(),
                "content_rep": catalog.content_rep[k].tolist(),
                "attrs": catalog.attrs[k].tolist(),
            }) + "\n")


def read_items(path: Path) -> ItemCatalog:
    meta, rows = _read_jsonl(Path(path))
    try:
        rows.sort(key=lambda r: r["item_id"])
        ids = np.array([r["item_id"] for r in rows], dtype=np.int64)
        if not np.array_equal(ids, np.arange(len(rows))):
            raise IngestError(f"{path}: item ids must be 0..n-1")
        cat = ItemCatalog(ids, np.array([r["latent"] for r in rows], dtype=float),
                          np.array([r["content_rep"] for r in rows], dtype=float),
                          np.array([r["popularity"] for r in rows], dtype=float),
                          np.array([r["category"] for r in rows], dtype=np.int64),
                          np.array([r["attrs"] for r in rows], dtype=float),
                          np.array([r["quality"] for r in rows], dtype=float),
                          np.array(meta.pop("centers"), dtype=float), meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{path}: malformed item record ({exc})") from exc
    return cat


def write_users(path: Path, users: UserTable) -> None:
    with open(path, "w") as fh:
        fh.write(_meta_line("users", users.meta) + "\n")
        for k in range(len(users)):
            fh.write(json.dumps({
                "user_id": int(users.user_id[k]),
                "category": int(users.category[k]),
                "activity": float(users.activity[k]),
                "latent": users.latent[k].tolist(),
                "profile": users.profile[k].tolist(),
                "history": [list(h) for h in users.history[k]],
            }) + "\n")


def read_users(path: Path) -> UserTable:
    meta, rows = _read_jsonl(Path(path))
    try:
        rows.sort(key=lambda r: r["user_id"])
        ids = np.array([r["user_id"] for r in rows], dtype=np.int64)
        if not np.array_equal(ids, np.arange(len(rows))):
            raise IngestError(f"{path}: user ids must be 0..n-1")
        return UserTable(ids, np.array([r["latent"] for r in rows], dtype=float),
                         np.array([r["activity"] for r in rows], dtype=float),
                         np.array([r["category"] for r in rows], dtype=np.int64),
                         np.array([r["profile"] for r in rows], dtype=float),
                         [[(int(a), int(b)) for a, b in r["history"]] for r in rows], meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{path}: malformed user record ({exc})") from exc


def write_events(path: Path, events: EventLog) -> None:
    with open(path, "w") as fh:
        fh.write("#" + _meta_line("events", events.meta) + "\n")
        fh.write("#user_id\titem_id\ttimestamp\tlabel\n")
        np.savetxt(fh, np.stack([events.user, events.item, events.timestamp, events.label], axis=1),
                   fmt="%d", delimiter="\t")


def read_events(path: Path) -> EventLog:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"missing dataset file {path}")
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise IngestError(f"{path} lacks a meta header line")
    meta = json.loads(first[1:])["meta"]
    try:
        arr = np.loadtxt(path, dtype=np.int64, comments="#", delimiter="\t", ndmin=2)
    except ValueError as exc:
        raise IngestError(f"{path}: malformed event row ({exc})") from exc
    if arr.shape[1] != 4:
        raise IngestError(f"{path}: expected 4 columns, got {arr.shape[1]}")
    if not np.isin(arr[:, 3], (0, 1)).all():
        raise IngestError(f"{path}: labels must be 0/1")
    return EventLog(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy(), meta)


def write_labels(path: Path, labels: ActivityLabels, meta: dict) -> None:
    def block(tail, counts_a, counts_b, act, names):
        return {str(k): {"tail": bool(tail[k]), names[0]: int(counts_a[k]),
                         names[1]: int(counts_b[k]), "activity": act[k].tolist()}
                for k in range(len(tail))}

    doc = {
        "meta": {"kind": "labels", **meta},
        "thresholds": {"user_clicks": labels.user_threshold, "item_exposures": labels.item_threshold},
        "users": block(labels.user_tail, labels.user_clicks, labels.user_exposures, labels.user_act,
                       ("clicks", "exposures")),
        "items": block(labels.item_tail, labels.item_exposures, labels.item_clicks, labels.item_act,
                       ("exposures", "clicks")),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def read_labels(path: Path) -> ActivityLabels:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"missing dataset file {path}")
    doc = json.loads(path.read_text())
    try:
        users = [doc["users"][str(k)] for k in range(len(doc["users"]))]
        items = [doc["items"][str(k)] for k in range(len(doc["items"]))]
        return ActivityLabels(
            np.array([u["tail"] for u in users], dtype=bool),
            np.array([i["tail"] for i in items], dtype=bool),
            np.array([u["clicks"] for u in users], dtype=np.int64),
            np.array([u["exposures"] for u in users], dtype=np.int64),
            np.array([i["exposures"] for i in items], dtype=np.int64),
            np.array([i["clicks"] for i in items], dtype=np.int64),
            np.array([u["activity"] for u in users], dtype=float).reshape(len(users), -1),
            np.array([i["activity"] for i in items], dtype=float).reshape(len(items), -1),
            doc["thresholds"]["user_clicks"], doc["thresholds"]["item_exposures"])
    except (KeyError, TypeError) as exc:
        raise IngestError(f"{path}: malformed labels ({exc})") from exc


@dataclass(frozen=True)
class DataConfig:
    num_users: int = 5000
    num_items: int = 2000
    num_events: int = 200_000
    num_days: int = 10
    test_days: int = 2
    num_categories: int = 20
    dim: int = 16
    zipf_items: float = 1.5
    zipf_users: float = 1.0
    noise_sigma: float = 0.05
    user_threshold: int = 5
    item_threshold: int = 10
    click: ClickModel = ClickModel()


@dataclass
class Dataset:
    items: ItemCatalog
    users: UserTable
    events: EventLog
    labels: ActivityLabels
    test_days: int

    def split(self) -> tuple[EventLog, EventLog]:
        return time_split(self.events, self.test_days)


def generate_dataset(cfg: DataConfig, seed: int) -> Dataset:
    """Full corpus: catalog, users, events, and train-split activity labels."""
    ss = np.random.SeedSequence(seed)
    s_items, s_users, s_events = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    items = generate_catalog(cfg.num_items, cfg.num_categories, cfg.dim, cfg.zipf_items,
                             cfg.noise_sigma, s_items)
    users = generate_users(cfg.num_users, cfg.dim, cfg.zipf_users, s_users, centers=items.centers)
    events = generate_interactions(items, users, cfg.num_events, cfg.click, s_events, cfg.num_days)
    for part in (items, users, events):
        part.meta["seed"] = seed
    train, _ = time_split(events, cfg.test_days)
    labels = label_head_tail(train, cfg.num_users, cfg.num_items, cfg.user_threshold,
                             cfg.item_threshold)
    return Dataset(items, users, events, labels, cfg.test_days)


def write_dataset(out: Path, ds: Dataset) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "items.jsonl", out / "users.jsonl", out / "events.tsv", out / "labels.json"]
    write_items(paths[0], ds.items)
    write_users(paths[1], ds.users)
    write_events(paths[2], ds.events)
    write_labels(paths[3], ds.labels, {**ds.events.meta, "test_days": ds.test_days})
    return paths


def read_dataset(root: Path) -> Dataset:
    root = Path(root)
    items = read_items(root / "items.jsonl")
    users = read_users(root / "users.jsonl")
    events = read_events(root / "events.tsv")
    labels_path = root / "labels.json"
    labels = read_labels(labels_path)
    test_days = json.loads(labels_path.read_text())["meta"].get("test_days")
    if test_days is None:
        raise IngestError(f"{labels_path}: meta lacks test_days")
    if len(events) and (events.user.max() >= len(users) or events.item.max() >= len(items)):
        raise IngestError("events reference unknown users or items")
    if len(labels.user_tail) != len(users) or len(labels.item_tail) != len(items):
        raise IngestError("labels do not cover the catalogs")
    return Dataset(items, users, events, labels, int(test_days))
