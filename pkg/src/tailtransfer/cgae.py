"""Cluster-guided adaptive embeddings.

Every entity owns an individual row ``d`` and shares a cluster row ``c`` with
all entities carrying the same full semantic id.  An activity gate mixes the
two: ``e = r * c + (1 - r) * d`` with ``r = G1(activity)``.

Knowledge moves between head and tail entities of related clusters through an
asymmetric InfoNCE on the cluster rows: the target side of each pair is
stop-gradiented, and the tail-anchored term carries the larger weight, so
tails are pulled toward heads much harder than the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Value
from .layers import MLP, Module

ORTHO_EPS = 1e-8


class ConfigError(ValueError):
    pass


class OutOfVocabularyError(KeyError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class TransferConfig:
    lambda1: float = 0.1  # head anchors pulled toward tails
    lambda2: float = 1.0  # tail anchors pulled toward heads
    tau: float = 0.1
    users: bool = True
    items: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"transfer temperature must be positive, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("transfer weights must be nonnegative")


@dataclass
class TransferReport:
    tail_anchors: int = 0
    head_anchors: int = 0

    @property
    def empty(self) -> bool:
        return self.tail_anchors == 0 and self.head_anchors == 0


class DualEmbeddingTable(Module):
    """Cluster rows keyed by full semantic id plus one individual row per entity.

    ``semantic_ids`` is an (entities, N) integer array.  Either table can be
    dropped for ablations.
    """

    def __init__(self, semantic_ids: np.ndarray, dim: int, rng: np.random.Generator | None,
                 init_scale: float = 0.01, cluster: bool = True, individual: bool = True):
        if not (cluster or individual):
            raise ConfigError("at least one of the cluster and individual tables is required")
        ids = np.asarray(semantic_ids, dtype=np.int64)
        keys, inverse = np.unique(ids, axis=0, return_inverse=True)
        self.semantic_ids = ids
        self.keys = [tuple(int(v) for v in k) for k in keys]
        self.key_to_row = {k: r for r, k in enumerate(self.keys)}
        self.cluster_row = inverse.reshape(-1)
        self.dim = dim

        def init(n):
            if rng is None or init_scale == 0:
                return np.zeros((n, dim))
            return rng.normal(0.0, init_scale, size=(n, dim))

        self.C = Value(init(len(self.keys)), requires_grad=True) if cluster else None
        self.D = Value(init(len(ids)), requires_grad=True) if individual else None

    @property
    def num_entities(self) -> int:
        return len(self.semantic_ids)

    def _check(self, entity_ids: np.ndarray) -> np.ndarray:
        entity_ids = np.asarray(entity_ids, dtype=np.int64)
        if entity_ids.size and (entity_ids.min() < 0 or entity_ids.max() >= self.num_entities):
            raise OutOfVocabularyError(f"entity id outside 0..{self.num_entities - 1}")
        return entity_ids

    def rows(self, entity_ids) -> np.ndarray:
        return self.cluster_row[self._check(entity_ids)]

    def lookup_dual(self, entity_ids, semantic_ids=None) -> tuple[Value | None, Value | None]:
        """Gather ``(c, d)`` rows; ``semantic_ids`` if given must be known keys."""
        entity_ids = self._check(entity_ids)
        if semantic_ids is None:
            rows = self.cluster_row[entity_ids]
        else:
            try:
                rows = np.array([self.key_to_row[tuple(int(v) for v in s)]
                                 for s in np.atleast_2d(semantic_ids)], dtype=np.int64)
            except KeyError as exc:
                raise OutOfVocabularyError(f"unknown semantic id {exc.args[0]}") from None
        c = gc.gather_rows(self.C, rows) if self.C is not None else None
        d = gc.gather_rows(self.D, entity_ids) if self.D is not None else None
        return c, d


class ActivityGate(Module):
    """``r = sigmoid(w2 . tanh(W1 f + b1) + b2)``; ``fixed`` replaces it by a constant."""

    def __init__(self, n_in: int, rng: np.random.Generator, hidden: int = 8, fixed: float | None = None):
        self.fixed = fixed
        self.net = None if fixed is not None else MLP([n_in, hidden, 1], rng, final="sigmoid")

    def __call__(self, features) -> Value:
        f = np.asarray(features.data if isinstance(features, Value) else features, dtype=np.float64)
        if not np.all(np.isfinite(f)):
            raise InputError("non-finite activity features")
        if self.net is None:
            return Value(np.full(f.shape[:-1] + (1,), self.fixed))
        return self.net(gc.as_value(features))


def gate_fuse(c, d, r) -> Value:
    """Convex combination ``r * c + (1 - r) * d``; ``r`` broadcasts over the last axis."""
    r = gc.as_value(r)
    return gc.add(gc.mul(r, c), gc.mul(gc.sub(1.0, r), d))


def ortho_loss(c, d, eps: float = ORTHO_EPS) -> tuple[Value, int]:
    """Mean squared cosine between rows of ``c`` and ``d``.

    Written as ``(c.d)^2 / (|c|^2 |d|^2 + eps^2)`` so zero rows contribute 0
    with a finite gradient.  The ratio is capped at 1, which rounding can
    exceed for parallel rows.  Returns the loss and the number of rows where
    both norms fell below ``eps``.
    """
    c, d = gc.as_value(c), gc.as_value(d)
    num = gc.square(gc.dot(c, d))
    den = gc.add(gc.mul(gc.dot(c, c), gc.dot(d, d)), eps * eps)
    cn = np.linalg.norm(np.atleast_2d(c.data), axis=-1)
    dn = np.linalg.norm(np.atleast_2d(d.data), axis=-1)
    degenerate = int(np.sum((cn < eps) & (dn < eps)))
    return gc.mean(gc.minimum(gc.div(num, den), 1.0)), degenerate


def _dense_keys(keys) -> np.ndarray:
    keys = np.asarray(keys)
    if keys.ndim == 1:
        return keys.astype(np.int64)
    return np.unique(keys, axis=0, return_inverse=True)[1].reshape(-1)


def _info_nce_rows(c: Value, anchors: np.ndarray, partners: np.ndarray, targets: np.ndarray,
                   neg_mask: np.ndarray, tau: float) -> Value:
    """InfoNCE with gradient into ``c[anchors]`` only; all targets are constants."""
    a = gc.l2_normalize(gc.gather_rows(c, anchors), eps=1e-12)
    logits = gc.mul(gc.matmul(a, Value(targets.T)), 1.0 / tau)
    mask = neg_mask[anchors].copy()
    mask[np.arange(len(anchors)), partners] = True
    pos = gc.sum_(gc.mul(logits, np.eye(len(targets))[partners]), axis=1)
    return gc.mean(gc.sub(gc.logsumexp(logits, mask=mask), pos))


def transfer_loss(c: Value, is_head, prefix_keys, cfg: TransferConfig,
                  rng: np.random.Generator, row_key=None,
                  frozen_targets: np.ndarray | None = None) -> tuple[Value, TransferReport]:
    """Asymmetric cross-activity InfoNCE over the cluster rows ``c`` of a batch.

    ``prefix_keys`` groups rows into related clusters (ints or id-prefix
    tuples).  Each tail row is paired with a uniformly drawn head row of the
    same group and each head with a tail, skipping partners that share the
    same ``row_key`` (aliases of one cluster row would be their own
    positive).  Negatives are rows of other groups.  Positives and negatives
    are stop-gradiented, so only anchors receive gradient; a zero weight
    removes its term entirely.  ``frozen_targets`` replaces the (normalized)
    target rows, which makes the loss a plain function of the anchors for
    finite-difference checks.
    """
    c = gc.as_value(c)
    is_head = np.asarray(is_head, dtype=bool)
    groups = _dense_keys(prefix_keys)
    n = len(is_head)
    rows = np.arange(n) if row_key is None else _dense_keys(row_key)
    if c.shape[0] != n or len(groups) != n:
        raise ConfigError("c, head flags and keys must describe the same rows")
    same_group = groups[:, None] == groups[None, :]
    eligible = same_group & (rows[:, None] != rows[None, :]) & (is_head[:, None] != is_head[None, :])
    if frozen_targets is None:
        norms = np.linalg.norm(c.data, axis=1, keepdims=True)
        targets = c.data / np.maximum(norms, 1e-12)
    else:
        targets = np.asarray(frozen_targets, dtype=np.float64)
    report = TransferReport()
    total: Value = Value(0.0)
    for weight, anchor_is_head in ((cfg.lambda2, False), (cfg.lambda1, True)):
        anchors = np.flatnonzero((is_head == anchor_is_head) & eligible.any(axis=1))
        if anchor_is_head:
            report.head_anchors = len(anchors)
        else:
            report.tail_anchors = len(anchors)
        if weight == 0 or len(anchors) == 0:
            continue
        partners = np.array([rng.choice(np.flatnonzero(eligible[a])) for a in anchors])
        term = _info_nce_rows(c, anchors, partners, targets, ~same_group, cfg.tau)
        total = gc.add(total, gc.mul(term, weight))
    return total, report


class CGAE(Module):
    """Dual table plus gate for one entity kind, honoring the ablation switches."""

    def __init__(self, semantic_ids: np.ndarray, activity: np.ndarray, dim: int,
                 rng: np.random.Generator, init_scale: float = 0.01, cluster: bool = True,
                 individual: bool = True, gate: bool = True, gate_hidden: int = 8):
        self.table = DualEmbeddingTable(semantic_ids, dim, rng, init_scale, cluster, individual)
        self.activity = np.asarray(activity, dtype=np.float64)
        self.mode = "dual" if cluster and individual else ("cluster" if cluster else "individual")
        self.gate = (ActivityGate(self.activity.shape[1], rng, gate_hidden, fixed=None if gate else 0.5)
                     if self.mode == "dual" else None)

    def embed(self, entity_ids) -> tuple[Value, Value | None, Value | None, Value | None]:
        """Returns ``(e, r, c, d)``; absent parts are None."""
        entity_ids = np.asarray(entity_ids, dtype=np.int64)
        c, d = self.table.lookup_dual(entity_ids)
        if self.mode == "cluster":
            return c, None, c, None
        if self.mode == "individual":
            return d, None, None, d
        r = self.gate(self.activity[entity_ids])
        return gate_fuse(c, d, r), r, c, d
