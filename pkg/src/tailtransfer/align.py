"""Contrastive alignment of item content with co-click signals, and user reps.

A small two-layer encoder maps item content vectors onto the unit sphere and
is trained with InfoNCE on co-occurring item pairs, using the other pairs in
the batch as negatives.  Since outputs are unit-normalized, the dot product
used in the loss equals cosine similarity.

User representations are recency-weighted means of the reps of items the user
clicked in the training window, with a fixed random projection of the profile
as a fallback for users without clicks.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Value
from .layers import MLP


class AlignmentSkippedWarning(UserWarning):
    """No co-occurrence pairs: raw content reps were normalized and passed through."""


class ConfigError(ValueError):
    pass


@dataclass
class AlignmentBatch:
    anchors: np.ndarray | Value
    positives: np.ndarray | Value
    negatives: np.ndarray | Value  # (N, K, d)
    tau: float = 0.1
    negative_mask: np.ndarray | None = None  # (N, K) True where the negative is used


@dataclass
class SemanticRepStore:
    kind: str
    vectors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, entity_id: int) -> np.ndarray:
        if not 0 <= entity_id < len(self.vectors):
            raise KeyError(f"no {self.kind} representation for id {entity_id}")
        return self.vectors[entity_id]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def info_nce(batch: AlignmentBatch) -> Value:
    """Mean over anchors of -log softmax(positive | positive + negatives)."""
    if batch.tau <= 0:
        raise ConfigError(f"temperature must be positive, got {batch.tau}")
    a, p, n = (gc.as_value(v) for v in (batch.anchors, batch.positives, batch.negatives))
    if not (a.shape[-1] == p.shape[-1] == n.shape[-1]):
        raise ConfigError("anchors, positives and negatives must share one dimension")
    pos = gc.mul(gc.dot(a, p), 1.0 / batch.tau)                                 # (N,)
    neg = gc.mul(gc.einsum2("nkd,nd->nk", n, a), 1.0 / batch.tau)               # (N, K)
    logits = gc.concat([gc.reshape(pos, pos.shape + (1,)), neg], axis=-1)
    mask = None
    if batch.negative_mask is not None:
        mask = np.concatenate([np.ones((len(pos.data), 1), bool), batch.negative_mask], axis=1)
    return gc.mean(gc.sub(gc.logsumexp(logits, mask=mask, canonical=True), pos))


def info_nce_in_batch(anchors: Value, positives: Value, tau: float,
                      positive_ids: np.ndarray | None = None) -> Value:
    """InfoNCE where each anchor's negatives are the other anchors' positives.

    Negatives carrying the same id as the anchor's own positive are masked.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = gc.mul(gc.matmul(anchors, gc.transpose(positives)), 1.0 / tau)
    n = logits.shape[0]
    mask = np.ones((n, n), dtype=bool)
    if positive_ids is not None:
        ids = np.asarray(positive_ids)
        mask = ids[None, :] != ids[:, None]
        np.fill_diagonal(mask, True)
    diag = gc.sum_(gc.mul(logits, np.eye(n)), axis=1)
    return gc.mean(gc.sub(gc.logsumexp(logits, mask=mask), diag))


@dataclass(frozen=True)
class EncoderConfig:
    dim_in: int = 16
    hidden: int = 32
    dim_out: int = 16
    tau: float = 0.5
    lr: float = 3e-3
    batch_size: int = 256
    epochs: int = 12

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class ItemEncoder(MLP):
    """``normalize(x + W2 tanh(W1 x + b1) + b2)``; starts as plain normalization."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.dim_in != cfg.dim_out:
            raise ConfigError("residual encoder needs dim_in == dim_out")
        super().__init__([cfg.dim_in, cfg.hidden, cfg.dim_out], rng, activation="tanh",
                         zero_last=True)

    def encode(self, x) -> Value:
        x = gc.as_value(x)
        return gc.l2_normalize(gc.add(x, self(x)))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def train_item_encoder(content: np.ndarray, pairs: np.ndarray, cfg: EncoderConfig = EncoderConfig(),
                       seed: int = 0) -> tuple[SemanticRepStore, list[float]]:
    """Fit the encoder on ``pairs`` (rows ``i1, i2[, count]``) and encode every item.

    Returns the item rep store and the mean training loss per epoch.
    """
    content = np.asarray(content, dtype=np.float64)
    if content.shape[1] != cfg.dim_in:
        raise ConfigError(f"content dim {content.shape[1]} != encoder input {cfg.dim_in}")
    meta = {"encoder_config": asdict(cfg), "config_hash": cfg.hash(), "seed": seed}
    if len(pairs) == 0:
        warnings.warn("no co-occurrence pairs; passing normalized content through",
                      AlignmentSkippedWarning, stacklevel=2)
        return SemanticRepStore("item", _normalize_rows(content),
                                {**meta, "alignment": "skipped"}), []
    rng = np.random.default_rng(seed)
    enc = ItemEncoder(cfg, rng)
    opt = gc.Adam(enc.parameters(), lr=cfg.lr)
    pairs = np.asarray(pairs)[:, :2]
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = pairs[order[start:start + cfg.batch_size]]
            if len(batch) < 2:
                continue
            # symmetric: each side of a pair serves as anchor once
            left = enc.encode(Value(content[batch[:, 0]]))
            right = enc.encode(Value(content[batch[:, 1]]))
            loss = gc.mul(gc.add(info_nce_in_batch(left, right, cfg.tau, batch[:, 1]),
                                 info_nce_in_batch(right, left, cfg.tau, batch[:, 0])), 0.5)
            opt.zero_grad()
            gc.backward_pass(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        history.append(total / count)
    reps = enc.encode(Value(content)).data
    return SemanticRepStore("item", reps, {**meta, "alignment": "trained"}), history


def recency_weights(n: int, decay: float) -> np.ndarray:
    """Weights ``decay**(n-1-t)`` for t = 0..n-1, normalized to sum to one."""
    w = decay ** np.arange(n - 1, -1, -1, dtype=np.float64)
    return w / w.sum()


def derive_user_reps(histories: Sequence[Sequence[int]], item_reps: SemanticRepStore,
                     profiles: np.ndarray, decay: float = 0.8, seed: int = 0) -> SemanticRepStore:
    """Recency-weighted pooled item reps per user; profile projection fallback."""
    dim = item_reps.dim
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(profiles.shape[1]), size=(profiles.shape[1], dim))
    out = np.empty((len(histories), dim))
    fallback = 0
    for u, hist in enumerate(histories):
        if len(hist):
            pooled = recency_weights(len(hist), decay) @ item_reps.vectors[np.asarray(hist)]
        else:
            pooled = np.zeros(dim)
        if not np.linalg.norm(pooled) > 0:
            pooled = profiles[u] @ proj
            fallback += 1
        out[u] = pooled / np.linalg.norm(pooled)
    return SemanticRepStore("user", out, {"decay": decay, "seed": seed, "profile_fallbacks": fallback,
                                          **{k: item_reps.meta[k] for k in ("config_hash",)
                                             if k in item_reps.meta}})


def write_reps(path: Path, store: SemanticRepStore) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": {"kind": store.kind, **store.meta}}, sort_keys=True) + "\n")
        for k, vec in enumerate(store.vectors):
            fh.write(json.dumps({"id": k, "vector": vec.tolist()}) + "\n")


def read_reps(path: Path) -> SemanticRepStore:
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0])["meta"]
    rows = [json.loads(line) for line in lines[1:] if line]
    rows.sort(key=lambda r: r["id"])
    kind = meta.pop("kind")
    return SemanticRepStore(kind, np.array([r["vector"] for r in rows], dtype=np.float64), meta)
