"""Residual-quantized autoencoder producing hierarchical semantic IDs.

An affine encoder maps unit-normalized reps to a latent ``z``; ``N`` codebooks
then quantize it greedily, each level coding what the previous levels left:

    id_k = argmin_i |r_{k-1} - e_i|^2,   r_k = r_{k-1} - e_{id_k},   r_0 = z

Codewords are learned by exponential moving averages of their assigned
residuals.  The encoder and decoder are trained on reconstruction error plus a
commitment term, with a straight-through estimator across the quantizer.
Optionally the last slot of every codebook is a frozen zero vector, which
guarantees ``|r_k| <= |r_{k-1}|``.

Semantic ids are 0-based codeword indices.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import Value
from .layers import Dense, Module


class ConfigError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    levels: int = 3
    codebook_size: int = 16
    codebook_sizes: tuple[int, ...] | None = None  # per-level override
    dim_in: int = 16
    dim_latent: int = 8
    beta_commit: float = 0.25
    ema_decay: float = 0.99
    lr: float = 3e-3
    lr_final_frac: float = 0.05  # cosine-annealed down to lr * lr_final_frac
    epochs: int = 60
    batch_size: int = 256
    reserve_zero: bool = True

    def sizes(self) -> tuple[int, ...]:
        sizes = self.codebook_sizes or (self.codebook_size,) * self.levels
        if len(sizes) != self.levels:
            raise ConfigError(f"{len(sizes)} codebook sizes for {self.levels} levels")
        if min(sizes) < 2:
            raise ConfigError("every codebook needs at least 2 codewords")
        return tuple(sizes)


@dataclass
class Codebook:
    level: int
    vectors: np.ndarray
    usage: np.ndarray
    frozen_zero: bool = False
    ema_count: np.ndarray | None = None
    ema_sum: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.vectors)

    @property
    def learnable(self) -> slice:
        return slice(0, self.size - 1) if self.frozen_zero else slice(0, self.size)


def nearest_codeword(residual: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per row; ties go to the lowest index."""
    d = ((residual[:, None, :] - vectors[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def quantize(latent: np.ndarray, codebooks: list[Codebook] | list[np.ndarray]):
    """Greedy residual quantization of one latent vector or a batch of them.

    Returns ``(ids, residuals, quantized_sum)`` with ``residuals[..., k, :]``
    equal to ``r_k`` for k = 0..N.  Does not touch the codebooks.
    """
    z = np.asarray(latent, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    books = [cb.vectors if isinstance(cb, Codebook) else np.asarray(cb, float) for cb in codebooks]
    if any(b.shape[1] != z.shape[1] for b in books):
        raise ConfigError(f"latent dim {z.shape[1]} does not match the codebooks")
    ids = np.empty((len(z), len(books)), dtype=np.int64)
    residuals = np.empty((len(z), len(books) + 1, z.shape[1]))
    residuals[:, 0] = z
    qsum = np.zeros_like(z)
    r = z
    for k, vecs in enumerate(books):
        ids[:, k] = nearest_codeword(r, vecs)
        chosen = vecs[ids[:, k]]
        qsum = qsum + chosen
        r = r - chosen
        residuals[:, k + 1] = r
    if single:
        return tuple(int(i) for i in ids[0]), residuals[0], qsum[0]
    return ids, residuals, qsum


class QuantizerModel(Module):
    def __init__(self, cfg: QuantizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Dense(cfg.dim_in, cfg.dim_latent, rng)
        self.decoder = Dense(cfg.dim_latent, cfg.dim_in, rng)
        self.codebooks = [Codebook(k + 1, np.zeros((m, cfg.dim_latent)), np.zeros(m, np.int64),
                                   cfg.reserve_zero)
                          for k, m in enumerate(cfg.sizes())]

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.numpy(np.asarray(x, dtype=np.float64))

    def quantize(self, x: np.ndarray):
        return quantize(self.encode(x), self.codebooks)

    def reconstruct(self, x: np.ndarray, levels: int | None = None) -> np.ndarray:
        """Decode the partial codeword sum over the first ``levels`` levels."""
        levels = self.cfg.levels if levels is None else levels
        ids, res, _ = self.quantize(x)
        partial = res[:, 0] - res[:, levels]
        return self.decoder.numpy(partial)

    def loss(self, x: np.ndarray | Value, frozen: tuple[np.ndarray, np.ndarray] | None = None
             ) -> tuple[Value, np.ndarray, np.ndarray]:
        """Reconstruction MSE + commitment, with a straight-through quantizer.

        The decoder sees ``z + sg(q - z)``, i.e. ``q`` forward and the identity
        backward; the commitment term pulls ``z`` toward ``sg(q)``.  ``frozen``
        pins ``(q - z, q)`` from some base point, which turns the loss into a
        smooth surrogate whose gradient is the straight-through one (used for
        finite-difference checks).  Returns ``(loss, ids, residuals)``.
        """
        xv = gc.as_value(x)
        z = self.encoder(xv)
        ids, res, q = quantize(z.data, self.codebooks)
        offset, target = frozen if frozen is not None else (q - z.data, q)
        zq = gc.add(z, Value(offset))
        x_hat = self.decoder(zq)
        recon = gc.mean(gc.square(gc.sub(xv, x_hat)))
        commit = gc.mean(gc.square(gc.sub(z, Value(target))))
        return gc.add(recon, gc.mul(commit, self.cfg.beta_commit)), ids, res

    def params_dict(self) -> dict:
        return {name: p.data.tolist() for name, p in self.named_parameters()}


def _init_codebooks(model: QuantizerModel, z: np.ndarray, rng: np.random.Generator) -> None:
    r = z
    for cb in model.codebooks:
        n_learn = cb.size - 1 if cb.frozen_zero else cb.size
        pick = rng.choice(len(r), size=n_learn, replace=len(r) < n_learn)
        cb.vectors[:n_learn] = r[pick]
        cb.vectors[cb.learnable.stop:] = 0.0
        cb.ema_count = np.ones(cb.size)
        cb.ema_sum = cb.vectors.copy()
        r = r - cb.vectors[nearest_codeword(r, cb.vectors)]


def _ema_update(cb: Codebook, residual: np.ndarray, ids: np.ndarray, decay: float,
                eps: float = 1e-5) -> None:
    counts = np.bincount(ids, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.vectors)
    np.add.at(sums, ids, residual)
    cb.ema_count = decay * cb.ema_count + (1 - decay) * counts
    cb.ema_sum = decay * cb.ema_sum + (1 - decay) * sums
    total = cb.ema_count.sum()
    smoothed = (cb.ema_count + eps) / (total + cb.size * eps) * total
    learn = cb.learnable
    cb.vectors[learn] = cb.ema_sum[learn] / smoothed[learn, None]


def train_rqvae(reps: np.ndarray, cfg: QuantizerConfig = QuantizerConfig(),
                seed: int = 0) -> tuple[QuantizerModel, list[float]]:
    """Fit encoder/decoder and EMA codebooks; returns the model and per-epoch loss."""
    reps = np.asarray(reps, dtype=np.float64)
    sizes = cfg.sizes()
    if reps.ndim != 2 or reps.shape[1] != cfg.dim_in:
        raise ConfigError(f"reps of shape {reps.shape} do not match dim_in={cfg.dim_in}")
    if len(reps) < max(sizes):
        raise InsufficientDataError(f"{len(reps)} reps cannot populate a codebook of {max(sizes)}")
    rng = np.random.default_rng(seed)
    model = QuantizerModel(cfg, rng)
    _init_codebooks(model, model.encode(reps), rng)
    opt = gc.Adam(model.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        lo = cfg.lr * cfg.lr_final_frac
        opt.lr = lo + 0.5 * (cfg.lr - lo) * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        for cb in model.codebooks:
            cb.usage[:] = 0
        order = rng.permutation(len(reps))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            x = reps[order[start:start + cfg.batch_size]]
            loss, ids, res = model.loss(x)
            opt.zero_grad()
            gc.backward_pass(loss)
            opt.step()
            for k, cb in enumerate(model.codebooks):
                _ema_update(cb, res[:, k], ids[:, k], cfg.ema_decay)
                cb.usage += np.bincount(ids[:, k], minlength=cb.size)
            total += loss.item() * len(x)
        history.append(total / len(reps))
        _reseed_dead(model, reps, rng)
    if cfg.epochs > 0:
        _refit_centroids(model, reps)
    return model, history


def _refit_centroids(model: QuantizerModel, reps: np.ndarray) -> None:
    """Move each used codeword to the exact mean of its residuals, level by level."""
    r = model.encode(reps)
    for cb in model.codebooks:
        ids = nearest_codeword(r, cb.vectors)
        counts = np.bincount(ids, minlength=cb.size)
        sums = np.zeros_like(cb.vectors)
        np.add.at(sums, ids, r)
        used = np.flatnonzero(counts[cb.learnable] > 0)
        cb.vectors[used] = sums[used] / counts[used, None]
        r = r - cb.vectors[nearest_codeword(r, cb.vectors)]


def _reseed_dead(model: QuantizerModel, reps: np.ndarray, rng: np.random.Generator) -> None:
    _, res, _ = model.quantize(reps)
    for k, cb in enumerate(model.codebooks):
        dead = np.flatnonzero(cb.usage[cb.learnable] == 0)
        if dead.size == 0:
            continue
        pick = rng.choice(len(reps), size=dead.size, replace=len(reps) < dead.size)
        cb.vectors[dead] = res[pick, k]
        cb.ema_count[dead] = 1.0
        cb.ema_sum[dead] = cb.vectors[dead]


class SemanticIdMap:
    """entity id -> semantic id tuple; unknown ids raise KeyError."""

    def __init__(self, kind: str, ids: np.ndarray):
        self.kind = kind
        self.ids = np.asarray(ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, entity_id: int) -> tuple[int, ...]:
        if not 0 <= entity_id < len(self.ids):
            raise KeyError(f"no semantic id for {self.kind} {entity_id}")
        return tuple(int(v) for v in self.ids[entity_id])

    @property
    def levels(self) -> int:
        return self.ids.shape[1]


def assign_semantic_ids(reps: np.ndarray, model: QuantizerModel, kind: str = "item") -> SemanticIdMap:
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[1] != model.cfg.dim_in:
        raise ConfigError(f"reps of shape {reps.shape} do not match quantizer dim {model.cfg.dim_in}")
    ids, _, _ = model.quantize(reps)
    return SemanticIdMap(kind, ids)


@dataclass
class ClusterIndex:
    level: int
    keys: list[tuple[int, ...]]
    cluster_of: np.ndarray
    members: list[np.ndarray]
    mean_features: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])


def build_cluster_index(id_map: SemanticIdMap | np.ndarray, level: int) -> ClusterIndex:
    """Partition entities by the first ``level`` codes of their semantic id."""
    ids = id_map.ids if isinstance(id_map, SemanticIdMap) else np.asarray(id_map)
    if not 1 <= level <= ids.shape[1]:
        raise ConfigError(f"level {level} outside 1..{ids.shape[1]}")
    keys, inverse = np.unique(ids[:, :level], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
    members = [order[bounds[c]:bounds[c + 1]] for c in range(len(keys))]
    return ClusterIndex(level, [tuple(int(v) for v in k) for k in keys], inverse, members)


def purity(index: ClusterIndex, categories: np.ndarray) -> float:
    """Share of entities carrying their cluster's majority category."""
    categories = np.asarray(categories)
    hits = sum(np.bincount(categories[m]).max() for m in index.members)
    return hits / len(index.cluster_of)


def cluster_stats(index: ClusterIndex, categories: np.ndarray | None = None) -> dict:
    n = len(index.cluster_of)
    if n == 0:
        raise ConfigError("empty cluster index")
    sizes = index.sizes
    stats = {
        "entities": n,
        "clusters": len(index),
        "collision_rate": 1.0 - len(index) / n,
        "mean_cluster_size": n / len(index),
        "size_histogram": {int(k): int(v) for k, v in sorted(Counter(sizes.tolist()).items())},
    }
    if categories is not None:
        stats["category_purity"] = purity(index, categories)
    return stats


# ---------------------------------------------------------------------------
# serialization


def write_semantic_ids(path: Path, maps: list[SemanticIdMap]) -> None:
    with open(path, "w") as fh:
        levels = maps[0].levels
        fh.write("#entity_kind\tentity_id\t" + "\t".join(f"id{k + 1}" for k in range(levels)) + "\n")
        for m in maps:
            for eid, row in enumerate(m.ids):
                fh.write("\t".join([m.kind, str(eid), *map(str, row)]) + "\n")


def read_semantic_ids(path: Path) -> dict[str, SemanticIdMap]:
    rows: dict[str, list] = {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        kind, eid, *codes = line.split("\t")
        rows.setdefault(kind, []).append((int(eid), [int(c) for c in codes]))
    out = {}
    for kind, entries in rows.items():
        entries.sort()
        if [e for e, _ in entries] != list(range(len(entries))):
            raise ConfigError(f"{path}: {kind} ids are not contiguous")
        out[kind] = SemanticIdMap(kind, np.array([c for _, c in entries], dtype=np.int64))
    return out


def model_to_dict(model: QuantizerModel, seed: int) -> dict:
    return {
        "config": asdict(model.cfg),
        "seed": seed,
        "codebooks": [{"level": cb.level, "frozen_zero": cb.frozen_zero,
                       "vectors": cb.vectors.tolist(), "usage": cb.usage.tolist()}
                      for cb in model.codebooks],
        "params": model.params_dict(),
    }


def model_from_dict(doc: dict) -> QuantizerModel:
    cfg_doc = dict(doc["config"])
    if cfg_doc.get("codebook_sizes") is not None:
        cfg_doc["codebook_sizes"] = tuple(cfg_doc["codebook_sizes"])
    model = QuantizerModel(QuantizerConfig(**cfg_doc), np.random.default_rng(0))
    for cb, saved in zip(model.codebooks, doc["codebooks"]):
        cb.vectors = np.array(saved["vectors"], dtype=np.float64)
        cb.usage = np.array(saved["usage"], dtype=np.int64)
    for name, p in model.named_parameters():
        p.data = np.array(doc["params"][name], dtype=np.float64)
    return model


def write_codebooks(path: Path, models: dict[str, tuple[QuantizerModel, int]]) -> None:
    Path(path).write_text(json.dumps({kind: model_to_dict(m, s) for kind, (m, s) in models.items()},
                                     sort_keys=True))


def read_codebooks(path: Path) -> dict[str, QuantizerModel]:
    return {kind: model_from_dict(doc) for kind, doc in json.loads(Path(path).read_text()).items()}
