"""Hierarchical feature aggregation and the ranking head.

Two views of each (user, item) sample are built:

* instance view ``[H_u; H_i; S_ui]`` from the entities' own attributes, stats
  and fused embeddings plus target attention over the user's recent clicks;
* cluster view ``[H_G(u); H_G(i); S_G(u),i]`` from per-cluster mean features
  and target attention over clicks retrieved from the user's cluster mates,
  filtered to items sharing the target's top-level semantic id.

Each view is projected to a shared width and mixed by an activity gate
``alpha``; a small feed-forward network scores the result.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Value
from .layers import MLP, Dense, Module

PAD = -1


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureLayout:
    """Named, ordered slots of a concatenated feature vector."""

    slots: tuple[tuple[str, int], ...]

    @property
    def width(self) -> int:
        return sum(w for _, w in self.slots)

    def offsets(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, w in self.slots:
            out[name] = slice(pos, pos + w)
            pos += w
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.slots).encode()).hexdigest()[:16]

    def assemble(self, parts: dict[str, Value | np.ndarray | None]) -> Value:
        values = []
        for name, w in self.slots:
            part = parts.get(name)
            if part is None:
                raise LayoutError(f"missing feature slot {name!r}")
            part = gc.as_value(part)
            if part.shape[-1] != w:
                raise LayoutError(f"slot {name!r} expects width {w}, got {part.shape[-1]}")
            values.append(part)
        return gc.concat(values, axis=-1)


def entity_layout(kind: str, attr_dim: int, stats_dim: int, emb_dim: int) -> FeatureLayout:
    return FeatureLayout(((f"{kind}_attr", attr_dim), (f"{kind}_stats", stats_dim), (f"{kind}_emb", emb_dim)))


def instance_layout(user: FeatureLayout, item: FeatureLayout, emb_dim: int) -> FeatureLayout:
    return FeatureLayout(user.slots + item.slots + (("seq_context", emb_dim),))


def target_attention(seq, target, mask=None, no_context=None,
                     scaled: bool = False) -> tuple[Value, np.ndarray, np.ndarray]:
    """Softmax(target . h_j) weighted sum of sequence vectors.

    ``seq`` is (L, m) or (B, L, m), ``target`` (m,) or (B, m), ``mask`` marks
    real positions.  Rows with no real position return ``no_context`` (or
    zeros if none is given).  Returns ``(S, weights, empty)``.
    """
    seq, target = gc.as_value(seq), gc.as_value(target)
    single = len(seq.shape) == 2
    if single:
        seq = gc.reshape(seq, (1,) + seq.shape)
        target = gc.reshape(target, (1,) + target.shape)
        mask = None if mask is None else np.asarray(mask, bool)[None]
    b, length, m = seq.shape
    if target.shape != (b, m):
        raise LayoutError(f"target shape {target.shape} does not match sequence {seq.shape}")
    mask = np.ones((b, length), bool) if mask is None else np.asarray(mask, bool)
    logits = gc.einsum2("blm,bm->bl", seq, target)
    if scaled:
        logits = gc.mul(logits, 1.0 / np.sqrt(m))
    weights = gc.softmax(logits, mask=mask)
    out = gc.einsum2("bl,blm->bm", weights, seq)
    empty = ~mask.any(axis=1)
    if no_context is not None and empty.any():
        out = gc.add(out, gc.mul(gc.reshape(gc.as_value(no_context), (1, m)),
                                 empty[:, None].astype(np.float64)))
    if single:
        return gc.reshape(out, (m,)), weights.data[0], empty
    return out, weights.data, empty


@dataclass
class ClusterMeans:
    means: np.ndarray
    sizes: np.ndarray
    epoch: int


def compute_cluster_means(cluster_of: np.ndarray, features: np.ndarray, epoch: int = 0) -> ClusterMeans:
    """Mean feature vector per cluster; ``cluster_of`` maps entity -> cluster."""
    cluster_of = np.asarray(cluster_of, dtype=np.int64)
    features = np.asarray(features, dtype=np.float64)
    n = int(cluster_of.max()) + 1
    sizes = np.bincount(cluster_of, minlength=n)
    if np.any(sizes == 0):
        raise LayoutError("every cluster needs at least one member")
    sums = np.zeros((n, features.shape[1]))
    np.add.at(sums, cluster_of, features)
    return ClusterMeans(sums / sizes[:, None], sizes, epoch)


def hard_retrieve(member_clicks, item_l1: np.ndarray, target_l1: int, cap: int,
                  before: int | None = None) -> list[int]:
    """Cluster mates' clicked items whose top-level id equals ``target_l1``.

    ``member_clicks`` holds one list of ``(item, timestamp)`` per member.
    Only clicks strictly before ``before`` count.  Most recent first, at most
    ``cap`` entries; ties in time keep member order.
    """
    hits = [(t, k, item) for k, clicks in enumerate(member_clicks) for item, t in clicks
            if item_l1[item] == target_l1 and (before is None or t < before)]
    hits.sort(key=lambda h: (-h[0], h[1]))
    return [item for _, _, item in hits[:cap]]


def _last_before(times: np.ndarray, items: np.ndarray, t: int, cap: int, out: np.ndarray) -> None:
    end = np.searchsorted(times, t, side="left")
    chunk = items[max(0, end - cap):end][::-1]
    out[:len(chunk)] = chunk


def build_sequences(users: np.ndarray, times: np.ndarray, click_user: np.ndarray,
                    click_item: np.ndarray, click_time: np.ndarray, num_users: int,
                    cap: int) -> np.ndarray:
    """Per event, the user's last ``cap`` clicked items strictly before its time.

    Most recent first, padded with ``PAD``.  Clicks must be sorted by
    (user, time).
    """
    out = np.full((len(users), cap), PAD, dtype=np.int32)
    bounds = np.searchsorted(click_user, np.arange(num_users + 1))
    for e, (u, t) in enumerate(zip(users, times)):
        lo, hi = bounds[u], bounds[u + 1]
        if hi > lo:
            _last_before(click_time[lo:hi], click_item[lo:hi], t, cap, out[e])
    return out


def build_retrievals(users: np.ndarray, items: np.ndarray, times: np.ndarray,
                     user_cluster: np.ndarray, item_l1: np.ndarray, click_user: np.ndarray,
                     click_item: np.ndarray, click_time: np.ndarray, cap: int) -> np.ndarray:
    """Per event, ``hard_retrieve`` over the user's full-id cluster, vectorised by (cluster, l1)."""
    out = np.full((len(users), cap), PAD, dtype=np.int32)
    g = user_cluster[click_user]
    l1 = item_l1[click_item]
    # stable sort keeps member order on equal timestamps, matching hard_retrieve
    order = np.lexsort((click_time, l1, g))
    g, l1, ct, ci = g[order], l1[order], click_time[order], click_item[order]
    n_l1 = int(item_l1.max()) + 1
    key = g.astype(np.int64) * n_l1 + l1
    starts = np.searchsorted(key, np.unique(key))
    ends = np.append(starts[1:], len(key))
    spans = dict(zip(key[starts].tolist(), zip(starts.tolist(), ends.tolist())))
    ev_key = user_cluster[users].astype(np.int64) * n_l1 + item_l1[items]
    for e, (k, t) in enumerate(zip(ev_key.tolist(), times)):
        span = spans.get(k)
        if span is not None:
            lo, hi = span
            _last_before(ct[lo:hi], ci[lo:hi], t, cap, out[e])
    return out


def gather_sequence(table: Value, seq_idx: np.ndarray) -> tuple[Value, np.ndarray]:
    """Rows of ``table`` for a padded index array -> ((B, L, m), mask)."""
    mask = seq_idx != PAD
    flat = np.where(mask, seq_idx, 0).reshape(-1)
    rows = gc.gather_rows(table, flat)
    return gc.reshape(rows, seq_idx.shape + (table.shape[1],)), mask


class ViewFusion(Module):
    """Per-view projections, activity gate ``alpha`` and convex mixing.

    ``views`` selects which views exist; ``gate=False`` fixes ``alpha`` at 0.5.
    """

    def __init__(self, inst_width: int, clust_width: int, act_width: int, dim: int,
                 rng: np.random.Generator, instance: bool = True, cluster: bool = True,
                 gate: bool = True, gate_hidden: int = 8):
        if not (instance or cluster):
            raise LayoutError("at least one view is required")
        self.P_inst = Dense(inst_width, dim, rng) if instance else None
        self.P_clust = Dense(clust_width, dim, rng) if cluster else None
        both = instance and cluster
        self.fixed_alpha = None if (gate and both) else 0.5
        self.G2 = MLP([act_width, gate_hidden, 1], rng, final="sigmoid") if both and gate else None
        self.dim = dim

    def __call__(self, h_inst, h_clust, act) -> tuple[Value, Value | None]:
        if self.P_clust is None:
            return self.P_inst(h_inst), None
        if self.P_inst is None:
            return self.P_clust(h_clust), None
        pi, pc = self.P_inst(h_inst), self.P_clust(h_clust)
        act = np.asarray(act, dtype=np.float64)
        alpha = self.G2(Value(act)) if self.G2 is not None else Value(np.full(act.shape[:-1] + (1,), 0.5))
        return fuse_views(pi, pc, alpha), alpha


def fuse_views(h_inst, h_clust, alpha) -> Value:
    """``alpha * h_clust + (1 - alpha) * h_inst`` for already-projected views."""
    h_inst, h_clust = gc.as_value(h_inst), gc.as_value(h_clust)
    if h_inst.shape != h_clust.shape:
        raise LayoutError(f"projected views differ: {h_inst.shape} vs {h_clust.shape}")
    alpha = gc.as_value(alpha)
    return gc.add(gc.mul(alpha, h_clust), gc.mul(gc.sub(1.0, alpha), h_inst))


class Ranker(Module):
    """Two-layer scorer; the last layer starts at zero so every score starts at 0.5."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.net = MLP([dim, hidden, 1], rng, activation="tanh", zero_last=True)

    def logits(self, f) -> Value:
        out = self.net(f)
        return gc.reshape(out, out.shape[:-1])

    def __call__(self, f) -> Value:
        return gc.sigmoid(self.logits(f))


def rank(ranker: Ranker, f) -> Value:
    return ranker(f)
