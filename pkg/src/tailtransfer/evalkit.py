"""Ranking metrics, head/tail slice reports, ablation deltas and cluster diagnostics.

AUC is the Mann-Whitney statistic with ties counted as half a pair.  GAUC is
the impression-weighted mean of per-user AUC over users whose samples contain
both classes.  Slices: *Tail* samples have a tail user or a tail item, *Head*
samples have both a head user and a head item, so the two never overlap.
Metrics that cannot be computed are reported as undefined, never imputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SLICES = ("Total", "Head", "Tail")
METRICS = ("auc", "gauc")
SLICE_DEFINITION = {
    "Head": "head user and head item (train-window activity)",
    "Tail": "tail user or tail item (train-window activity)",
}


class UndefinedMetricError(ValueError):
    pass


class ComparabilityError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; exact, since twice the rank sum is integral."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"auc needs both classes (positives={n_pos}, negatives={n_neg})")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    # doubled average rank of a tie block occupying ranks starts+1..ends
    doubled = np.repeat(starts + ends + 1, ends - starts)
    twice_rank_sum = int(doubled[pos[order]].sum())
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg)


def auc_bruteforce(scores, labels) -> float:
    """O(P*N) pair counting, kept as a reference implementation."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p, n = scores[labels == 1], scores[labels != 1]
    if len(p) == 0 or len(n) == 0:
        raise UndefinedMetricError("auc needs both classes")
    wins = int((p[:, None] > n[None, :]).sum())
    ties = int((p[:, None] == n[None, :]).sum())
    return (wins + ties / 2) / (len(p) * len(n))


@dataclass
class GaucResult:
    value: float
    groups_used: int
    groups_excluded: int
    samples_used: int


def gauc(scores, labels, groups) -> GaucResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if len(groups) == 0:
        raise UndefinedMetricError("gauc: no samples")
    order = np.argsort(groups, kind="stable")
    g = groups[order]
    starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    ends = np.r_[starts[1:], len(g)]
    weighted, weight, used, excluded = 0.0, 0, 0, 0
    for a, b in zip(starts, ends):
        idx = order[a:b]
        y = labels[idx]
        if y.min() == y.max():
            excluded += 1
            continue
        weighted += (b - a) * auc(scores[idx], y)
        weight += b - a
        used += 1
    if used == 0:
        raise UndefinedMetricError("gauc: no group contains both classes")
    return GaucResult(float(weighted / weight), used, excluded, int(weight))


@dataclass
class ScoredSamples:
    user: np.ndarray
    item: np.ndarray
    score: np.ndarray
    label: np.ndarray
    user_tail: np.ndarray
    item_tail: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    @property
    def tail(self) -> np.ndarray:
        return self.user_tail | self.item_tail

    @property
    def head(self) -> np.ndarray:
        return ~self.tail

    def subset(self, mask) -> "ScoredSamples":
        return ScoredSamples(*(getattr(self, f)[mask] for f in
                               ("user", "item", "score", "label", "user_tail", "item_tail")))


def _metric_entry(fn) -> dict:
    try:
        out = fn()
    except UndefinedMetricError as exc:
        return {"value": None, "undefined": str(exc)}
    if isinstance(out, GaucResult):
        return {"value": out.value, "groups_used": out.groups_used,
                "groups_excluded": out.groups_excluded, "count": out.samples_used}
    return {"value": out}


def slice_report(samples: ScoredSamples, config_hash: str = "") -> dict:
    """Total/Head/Tail x AUC/GAUC with counts; undefined metrics are marked."""
    masks = {"Total": np.ones(len(samples), bool), "Head": samples.head, "Tail": samples.tail}
    slices = {}
    for name in SLICES:
        sub = samples.subset(masks[name])
        slices[name] = {
            "count": int(len(sub)),
            "positives": int(np.sum(sub.label == 1)),
            "auc": {**_metric_entry(lambda: auc(sub.score, sub.label)), "count": len(sub)},
            "gauc": _metric_entry(lambda: gauc(sub.score, sub.label, sub.user)),
        }
        slices[name]["gauc"].setdefault("count", 0)
    return {"config_hash": config_hash, "slice_definition": SLICE_DEFINITION,
            "gauc_weighting": "impressions, single-class users excluded", "slices": slices}


def metric_value(report: dict, slice_name: str, metric: str) -> float | None:
    return report["slices"][slice_name][metric]["value"]


def ablation_report(baseline: dict, ablations: dict[str, dict]) -> dict:
    """Percent change ``(ablated - full) / full * 100`` per slice and metric."""
    rows = {}
    for name, rep in ablations.items():
        if rep.get("comparability_key") != baseline.get("comparability_key"):
            raise ComparabilityError(f"run {name!r} does not share the baseline's data and seed")
        rows[name] = {}
        for s in SLICES:
            for m in METRICS:
                full, abl = metric_value(baseline, s, m), metric_value(rep, s, m)
                key = f"{s}/{m}"
                rows[name][key] = None if full is None or abl is None else (abl - full) / full * 100.0
    return {"baseline": {f"{s}/{m}": metric_value(baseline, s, m) for s in SLICES for m in METRICS},
            "deltas": rows}


def _fmt(v, pct: bool = False) -> str:
    if v is None:
        return "undef"
    return f"{v:+.2f}%" if pct else f"{v:.4f}"


def format_slice_table(report: dict, title: str = "model") -> str:
    header = f"{'':<22}" + "".join(f"{s + ' ' + m.upper():>13}" for s in SLICES for m in METRICS)
    row = f"{title:<22}" + "".join(f"{_fmt(metric_value(report, s, m)):>13}" for s in SLICES for m in METRICS)
    counts = f"{'samples':<22}" + "".join(f"{report['slices'][s]['count']:>13}" for s in SLICES for _ in METRICS)
    return "\n".join([header, row, counts])


def format_ablation_table(table: dict) -> str:
    cols = [f"{s}/{m}" for s in SLICES for m in METRICS]
    lines = [f"{'variant':<22}" + "".join(f"{c:>13}" for c in cols),
             f"{'full model':<22}" + "".join(f"{_fmt(table['baseline'][c]):>13}" for c in cols)]
    for name, deltas in table["deltas"].items():
        lines.append(f"{name:<22}" + "".join(f"{_fmt(deltas[c], pct=True):>13}" for c in cols))
    return "\n".join(lines)


def write_scores(path: Path, samples: ScoredSamples) -> None:
    with open(path, "w") as fh:
        fh.write("#user_id\titem_id\tscore\tlabel\tflags\n")
        for u, i, s, y, ut, it in zip(samples.user, samples.item, samples.score, samples.label,
                                      samples.user_tail, samples.item_tail):
            flags = ("t" if ut else "h") + ("t" if it else "h")
            fh.write(f"{u}\t{i}\t{float(s)!r}\t{y}\t{flags}\n")


def read_scores(path: Path) -> ScoredSamples:
    rows = [line.split("\t") for line in Path(path).read_text().splitlines()
            if line and not line.startswith("#")]
    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return ScoredSamples(empty, empty, np.zeros(0), empty, empty.astype(bool), empty.astype(bool))
    cols = list(zip(*rows))
    return ScoredSamples(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                         np.array(cols[2], dtype=np.float64), np.array(cols[3], dtype=np.int64),
                         np.array([f[0] == "t" for f in cols[4]]), np.array([f[1] == "t" for f in cols[4]]))


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def cluster_quality(ids: np.ndarray, categories: np.ndarray, latents: np.ndarray | None = None,
                    num_pairs: int = 20_000, bins: int = 10, seed: int = 0) -> dict:
    """Per-level category purity vs. a shuffled-id baseline, and prefix agreement vs distance.

    The curve bins random entity pairs by latent distance (equal-count bins,
    nearest first) and reports the mean fraction of leading id levels they
    share.
    """
    ids = np.asarray(ids)
    categories = np.asarray(categories)
    rng = np.random.default_rng(seed)
    shuffled = ids[rng.permutation(len(ids))]
    out = {"levels": []}
    for level in range(1, ids.shape[1] + 1):
        out["levels"].append({"level": level, "purity": _purity(ids[:, :level], categories),
                              "shuffled_purity": _purity(shuffled[:, :level], categories)})
    if latents is not None and len(ids) > 1:
        a = rng.integers(0, len(ids), num_pairs)
        b = rng.integers(0, len(ids), num_pairs)
        dist = np.linalg.norm(latents[a] - latents[b], axis=1)
        agree = prefix_agreement(ids[a], ids[b])
        order = np.argsort(dist, kind="stable")
        chunks = np.array_split(order, bins)
        out["prefix_agreement_curve"] = [
            {"max_distance": float(dist[c].max()), "agreement": float(agree[c].mean())} for c in chunks if len(c)]
    return out


def prefix_agreement(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fraction of leading levels on which two id rows agree (stops at the first mismatch)."""
    same = np.asarray(a) == np.asarray(b)
    return np.cumprod(same, axis=1).sum(axis=1) / same.shape[1]


def _purity(prefixes: np.ndarray, categories: np.ndarray) -> float:
    _, inverse = np.unique(prefixes, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    table = np.zeros((inverse.max() + 1, categories.max() + 1), dtype=np.int64)
    np.add.at(table, (inverse, categories), 1)
    return float(table.max(axis=1).sum() / len(categories))
