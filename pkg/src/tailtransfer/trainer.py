"""CTR model assembly, objective, training loop, checkpoints and ablations.

The objective is ``L_main + L_trans + lambda_ortho * L_ortho``: binary
cross-entropy of the ranker, the asymmetric cluster transfer term for users
and items, and the squared-cosine penalty between cluster and individual
rows.  Everything random flows from ``TrainConfig.seed``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cgae, evalkit, hfa
from . import gradcore as gc
from . import synthdata as sd
from .gradcore import Value
from .layers import Module

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class Ablation:
    no_individual_emb: bool = False
    no_cluster_emb: bool = False
    no_cgae_gate: bool = False
    no_instance_view: bool = False
    no_cluster_view: bool = False
    no_hfa_gate: bool = False

    def validate(self) -> None:
        if self.no_individual_emb and self.no_cluster_emb:
            raise ConfigError("cannot drop both the individual and the cluster embedding")
        if self.no_instance_view and self.no_cluster_view:
            raise ConfigError("cannot drop both feature views")

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


ABLATIONS = tuple(f.name for f in fields(Ablation))


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    lambda_ortho: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 1.0
    tau_transfer: float = 0.1
    transfer_users: bool = True
    transfer_items: bool = True
    emb_dim: int = 16
    fusion_dim: int = 32
    ranker_hidden: int = 64
    gate_hidden: int = 8
    init_scale: float = 0.01
    seq_len: int = 50
    retrieve_cap: int = 100
    attention_scaled: bool = False
    val_days: int = 1
    ablation: Ablation = Ablation()

    def transfer(self) -> cgae.TransferConfig:
        return cgae.TransferConfig(self.lambda1, self.lambda2, self.tau_transfer,
                                   self.transfer_users, self.transfer_items)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        abl = dict(doc.pop("ablation", {}) or {})
        for name in ABLATIONS:
            if name in doc:
                abl[name] = doc.pop(name)
        return cls(**doc, ablation=Ablation(**abl))

    def hash(self, exclude_ablation: bool = False) -> str:
        doc = self.to_dict()
        if exclude_ablation:
            doc.pop("ablation")
            doc.pop("lambda1")
            doc.pop("lambda2")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class EventSet:
    user: np.ndarray
    item: np.ndarray
    label: np.ndarray
    seq: np.ndarray          # (n, seq_len) recent clicked items, PAD-filled
    retrieved: np.ndarray    # (n, retrieve_cap) cluster-retrieved items, PAD-filled

    def __len__(self) -> int:
        return len(self.user)


@dataclass
class TrainingData:
    """Everything the model reads, derived once from a dataset and semantic ids."""

    user_profile: np.ndarray
    item_attrs: np.ndarray
    user_stats: np.ndarray
    item_stats: np.ndarray
    user_ids: np.ndarray     # (users, N) semantic ids
    item_ids: np.ndarray     # (items, N)
    user_tail: np.ndarray
    item_tail: np.ndarray
    fit: EventSet
    val: EventSet
    test: EventSet
    key: str = ""

    @property
    def num_users(self) -> int:
        return len(self.user_profile)

    @property
    def num_items(self) -> int:
        return len(self.item_attrs)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd_ = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd_ > 0, sd_, 1.0)


def prepare_data(ds: sd.Dataset, user_ids: np.ndarray, item_ids: np.ndarray, seq_len: int = 50,
                 retrieve_cap: int = 100, val_days: int = 1) -> TrainingData:
    """Split events, standardize stats and precompute behaviour index arrays.

    Behaviours come from train-window clicks strictly before each event's
    time.  Validation is the last ``val_days`` days of the train window.
    """
    train, test = ds.split()
    val_start = (int(train.day.max()) + 1 - val_days) * sd.DAY
    is_val = train.timestamp >= val_start
    fit, val = train.subset(~is_val), train.subset(is_val)
    if len(fit) == 0 or len(val) == 0:
        raise ConfigError(f"validation split leaves fit={len(fit)} val={len(val)} events")
    cu, ci, ct = sd.click_sequences(train)
    user_cluster = np.unique(user_ids, axis=0, return_inverse=True)[1].reshape(-1)
    item_l1 = np.asarray(item_ids)[:, 0]

    def events(log: sd.EventLog) -> EventSet:
        seq = hfa.build_sequences(log.user, log.timestamp, cu, ci, ct, len(ds.users), seq_len)
        ret = hfa.build_retrievals(log.user, log.item, log.timestamp, user_cluster, item_l1,
                                   cu, ci, ct, retrieve_cap)
        return EventSet(log.user, log.item, log.label, seq, ret)

    key_src = json.dumps({"events": hashlib.sha256(ds.events.timestamp.tobytes() + ds.events.label.tobytes()
                                                   + ds.events.item.tobytes()).hexdigest(),
                          "uid": hashlib.sha256(np.ascontiguousarray(user_ids).tobytes()).hexdigest(),
                          "iid": hashlib.sha256(np.ascontiguousarray(item_ids).tobytes()).hexdigest(),
                          "seq_len": seq_len, "cap": retrieve_cap, "val_days": val_days})
    return TrainingData(
        user_profile=ds.users.profile, item_attrs=ds.items.attrs,
        user_stats=_standardize(ds.labels.user_act), item_stats=_standardize(ds.labels.item_act),
        user_ids=np.asarray(user_ids), item_ids=np.asarray(item_ids),
        user_tail=ds.labels.user_tail, item_tail=ds.labels.item_tail,
        fit=events(fit), val=events(val), test=events(test),
        key=hashlib.sha256(key_src.encode()).hexdigest()[:16])


# ---------------------------------------------------------------------------
# model


class RankingModel(Module):
    """CGAE embeddings for users and items, both feature views, fusion gate and ranker."""

    def __init__(self, data: TrainingData, cfg: TrainConfig, rng: np.random.Generator):
        abl = cfg.ablation
        abl.validate()
        m = cfg.emb_dim
        kw = dict(init_scale=cfg.init_scale, cluster=not abl.no_cluster_emb,
                  individual=not abl.no_individual_emb, gate=not abl.no_cgae_gate, gate_hidden=cfg.gate_hidden)
        self.users = cgae.CGAE(data.user_ids, data.user_stats, m, rng, **kw)
        self.items = cgae.CGAE(data.item_ids, data.item_stats, m, rng, **kw)
        self.user_layout = hfa.entity_layout("user", data.user_profile.shape[1], data.user_stats.shape[1], m)
        self.item_layout = hfa.entity_layout("item", data.item_attrs.shape[1], data.item_stats.shape[1], m)
        self.inst_layout = hfa.instance_layout(self.user_layout, self.item_layout, m)
        self.clust_layout = hfa.FeatureLayout(
            (("user_cluster", self.user_layout.width), ("item_cluster", self.item_layout.width),
             ("cluster_context", m)))
        self.use_instance = not abl.no_instance_view
        self.use_cluster = not abl.no_cluster_view
        self.no_context_inst = (Value(rng.normal(0.0, cfg.init_scale, m), requires_grad=True)
                                if self.use_instance else None)
        self.no_context_clust = (Value(rng.normal(0.0, cfg.init_scale, m), requires_grad=True)
                                 if self.use_cluster else None)
        act_width = data.user_stats.shape[1] + data.item_stats.shape[1] + 2
        self.fusion = hfa.ViewFusion(self.inst_layout.width, self.clust_layout.width, act_width,
                                     cfg.fusion_dim, rng, instance=self.use_instance,
                                     cluster=self.use_cluster, gate=not abl.no_hfa_gate,
                                     gate_hidden=cfg.gate_hidden)
        self.ranker = hfa.Ranker(cfg.fusion_dim, cfg.ranker_hidden, rng)
        self.cfg = cfg
        self.data = data
        self.user_cluster = self.users.table.cluster_row
        self.item_cluster = self.items.table.cluster_row
        self.cache: dict | None = None

    def assembly_hash(self) -> str:
        doc = [(name, p.shape) for name, p in self.named_parameters()]
        doc.append(("layouts", self.inst_layout.hash(), self.clust_layout.hash()))
        return hashlib.sha256(repr(doc).encode()).hexdigest()[:16]

    # -- cluster-view cache -------------------------------------------------

    def entity_features(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.data
        eu = self.users.embed(np.arange(d.num_users))[0].data
        ei = self.items.embed(np.arange(d.num_items))[0].data
        hu = np.concatenate([d.user_profile, d.user_stats, eu], axis=1)
        hi = np.concatenate([d.item_attrs, d.item_stats, ei], axis=1)
        return hu, hi

    def refresh_cache(self, epoch: int) -> None:
        """Recompute per-cluster mean features (without gradient) from current parameters."""
        if not self.use_cluster:
            self.cache = {"epoch": epoch}
            return
        hu, hi = self.entity_features()
        self.cache = {"epoch": epoch,
                      "user": hfa.compute_cluster_means(self.user_cluster, hu, epoch).means,
                      "item": hfa.compute_cluster_means(self.item_cluster, hi, epoch).means}

    # -- forward --------------------------------------------------------------

    def forward(self, ev: EventSet, idx: np.ndarray) -> dict:
        """Logits for events ``idx`` plus the pieces the auxiliary losses need."""
        d, cfg = self.data, self.cfg
        u, i = ev.user[idx], ev.item[idx]
        e_items, _, _, _ = self.items.embed(np.arange(d.num_items))
        e_user, r_user, _, _ = self.users.embed(u)
        target = gc.gather_rows(e_items, i)
        h_inst = h_clust = None
        seq = ev.seq[idx]
        ret = ev.retrieved[idx]
        if self.use_instance:
            hs, mask = hfa.gather_sequence(e_items, seq)
            s_inst, _, _ = hfa.target_attention(hs, target, mask, self.no_context_inst, cfg.attention_scaled)
            h_inst = self.inst_layout.assemble({
                "user_attr": d.user_profile[u], "user_stats": d.user_stats[u], "user_emb": e_user,
                "item_attr": d.item_attrs[i], "item_stats": d.item_stats[i], "item_emb": target,
                "seq_context": s_inst})
        if self.use_cluster:
            if self.cache is None or "user" not in self.cache:
                raise ConfigError("cluster-view cache is empty; call refresh_cache first")
            hr, mask = hfa.gather_sequence(e_items, ret)
            s_clust, _, _ = hfa.target_attention(hr, target, mask, self.no_context_clust, cfg.attention_scaled)
            h_clust = self.clust_layout.assemble({
                "user_cluster": self.cache["user"][self.user_cluster[u]],
                "item_cluster": self.cache["item"][self.item_cluster[i]],
                "cluster_context": s_clust})
        l1 = d.item_ids[:, 0]
        same_l1 = np.where(seq != hfa.PAD, l1[np.maximum(seq, 0)] == l1[i][:, None], False).sum(axis=1)
        cross = np.stack([np.log1p(same_l1), np.log1p((ret != hfa.PAD).sum(axis=1))], axis=1)
        act = np.concatenate([d.user_stats[u], d.item_stats[i], cross], axis=1)
        f, alpha = self.fusion(h_inst, h_clust, act)
        return {"logits": self.ranker.logits(f), "alpha": alpha, "r_user": r_user, "users": u, "items": i}

    def predict(self, ev: EventSet, batch: int = 4096, threads: int = 1) -> np.ndarray:
        """Click probabilities; chunks are fixed, so ``threads`` never changes the result."""
        out = np.empty(len(ev))
        chunks = [np.arange(s, min(s + batch, len(ev))) for s in range(0, len(ev), batch)]

        def score(idx):
            out[idx] = gc.sigmoid(self.forward(ev, idx)["logits"]).data

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(score, chunks))
        else:
            for idx in chunks:
                score(idx)
        return out


def apply_ablation(flags: Ablation, data: TrainingData, cfg: TrainConfig,
                   rng: np.random.Generator) -> RankingModel:
    """Build the model with the structural substitutions named by ``flags``.

    Dropping the cluster table also disables the transfer term; dropping
    either table disables the orthogonality term.
    """
    flags.validate()
    return RankingModel(data, replace(cfg, ablation=flags), rng)


# ---------------------------------------------------------------------------
# objective


def _pool_partners(table: cgae.DualEmbeddingTable, tail: np.ndarray, entities: np.ndarray,
                   prefix: np.ndarray, rng: np.random.Generator, pools: dict) -> np.ndarray:
    """For batch tails lacking an in-batch head partner, draw a head from the global pool."""
    rows = table.cluster_row
    heads = entities[~tail[entities]]
    have = {}
    for e in heads:
        have.setdefault(prefix[e], set()).add(rows[e])
    extra = []
    for e in entities[tail[entities]]:
        mates = have.get(prefix[e], set())
        if mates - {rows[e]}:
            continue
        pool = pools.get(prefix[e])
        if pool is None:
            continue
        cands = pool[rows[pool] != rows[e]]
        if len(cands):
            pick = int(cands[rng.integers(len(cands))])
            extra.append(pick)
            have.setdefault(prefix[e], set()).add(rows[pick])
    return np.array(extra, dtype=np.int64)


def head_pools(ids: np.ndarray, tail: np.ndarray) -> tuple[np.ndarray, dict]:
    """Level-(N-1) prefix key per entity and, per key, the head entities carrying it."""
    prefix = np.unique(ids[:, :-1], axis=0, return_inverse=True)[1].reshape(-1) if ids.shape[1] > 1 \
        else np.zeros(len(ids), dtype=np.int64)
    pools: dict = {}
    for e in np.flatnonzero(~tail):
        pools.setdefault(prefix[e], []).append(e)
    return prefix, {k: np.array(v) for k, v in pools.items()}


@dataclass
class LossTerms:
    total: Value
    main: float
    trans: float
    ortho: float
    ortho_weighted: float
    transfer_pairs: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {"total": self.total.item(), "main": self.main, "trans": self.trans,
                "ortho": self.ortho, "ortho_weighted": self.ortho_weighted, **self.transfer_pairs}


class Objective:
    def __init__(self, model: RankingModel, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        d = model.data
        self.user_prefix, self.user_pools = head_pools(d.user_ids, d.user_tail)
        self.item_prefix, self.item_pools = head_pools(d.item_ids, d.item_tail)
        abl = cfg.ablation
        self.transfer_on = not abl.no_cluster_emb
        self.ortho_on = not (abl.no_cluster_emb or abl.no_individual_emb)

    def _kind_terms(self, cg: cgae.CGAE, entities: np.ndarray, tail: np.ndarray, prefix: np.ndarray,
                    pools: dict, enabled: bool, rng: np.random.Generator):
        table = cg.table
        trans, report, ortho = None, None, None
        if self.transfer_on and enabled:
            extra = _pool_partners(table, tail, entities, prefix, rng, pools)
            members = np.concatenate([entities, extra])
            c = gc.gather_rows(table.C, table.cluster_row[members])
            trans, report = cgae.transfer_loss(c, ~tail[members], prefix[members], self.cfg.transfer(),
                                               rng, row_key=table.cluster_row[members])
        if self.ortho_on:
            c, d = table.lookup_dual(entities)
            ortho, _ = cgae.ortho_loss(c, d)
        return trans, report, ortho

    def __call__(self, ev: EventSet, idx: np.ndarray, rng: np.random.Generator) -> LossTerms:
        out = self.model.forward(ev, idx)
        labels = ev.label[idx].astype(np.float64)
        main = gc.mean(gc.bce_with_logits(out["logits"], labels))
        d, cfg = self.model.data, self.cfg
        trans_terms, ortho_terms, pairs = [], [], {}
        for kind, cg, entities, tail, prefix, pools, enabled in (
                ("user", self.model.users, np.unique(out["users"]), d.user_tail, self.user_prefix,
                 self.user_pools, cfg.transfer_users),
                ("item", self.model.items, np.unique(out["items"]), d.item_tail, self.item_prefix,
                 self.item_pools, cfg.transfer_items)):
            t, rep, o = self._kind_terms(cg, entities, tail, prefix, pools, enabled, rng)
            if t is not None:
                trans_terms.append(t)
                pairs[f"{kind}_tail_anchors"] = rep.tail_anchors
                pairs[f"{kind}_head_anchors"] = rep.head_anchors
            if o is not None:
                ortho_terms.append(o)
        trans = trans_terms[0] if trans_terms else Value(0.0)
        for t in trans_terms[1:]:
            trans = gc.add(trans, t)
        ortho = ortho_terms[0] if ortho_terms else Value(0.0)
        for o in ortho_terms[1:]:
            ortho = gc.add(ortho, o)
        weighted = gc.mul(ortho, cfg.lambda_ortho)
        total = gc.add(gc.add(main, trans), weighted)
        return LossTerms(total, main.item(), trans.item(), ortho.item(), weighted.item(), pairs)


def total_loss(objective: Objective, ev: EventSet, idx: np.ndarray, rng: np.random.Generator) -> LossTerms:
    return objective(ev, idx, rng)


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    data_key: str
    epoch: int
    position: int
    order: np.ndarray
    params: dict[str, np.ndarray]
    adam_step: int
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    adam_skipped: int
    rng_state: dict
    cache: dict
    history: list[dict]

    def save(self, path: Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.savez(path / "params.npz", **self.params)
        opt = {f"m{k}": m for k, m in enumerate(self.adam_m)}
        opt.update({f"v{k}": v for k, v in enumerate(self.adam_v)})
        opt["order"] = self.order
        opt.update({f"cache_{k}": v for k, v in self.cache.items() if isinstance(v, np.ndarray)})
        np.savez(path / "optimizer.npz", **opt)
        meta = {"version": CHECKPOINT_VERSION, "config": self.config, "config_hash": self.config_hash,
                "data_key": self.data_key, "epoch": self.epoch, "position": self.position,
                "adam_step": self.adam_step, "adam_skipped": self.adam_skipped,
                "num_moments": len(self.adam_m), "rng_state": self.rng_state,
                "cache_epoch": self.cache.get("epoch"), "history": self.history}
        (path / "checkpoint.json").write_text(json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        path = Path(path)
        meta = json.loads((path / "checkpoint.json").read_text())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        with np.load(path / "params.npz") as z:
            params = {k: z[k] for k in z.files}
        with np.load(path / "optimizer.npz") as z:
            n = meta["num_moments"]
            m = [z[f"m{k}"] for k in range(n)]
            v = [z[f"v{k}"] for k in range(n)]
            order = z["order"]
            cache = {k[len("cache_"):]: z[k] for k in z.files if k.startswith("cache_")}
        cache["epoch"] = meta["cache_epoch"]
        return cls(meta["config"], meta["config_hash"], meta["data_key"], meta["epoch"], meta["position"],
                   order, params, meta["adam_step"], m, v, meta["adam_skipped"], meta["rng_state"],
                   cache, meta["history"])


class Trainer:
    """Stateful training run; ``state()`` / ``restore()`` give bitwise-exact resumption."""

    def __init__(self, data: TrainingData, cfg: TrainConfig):
        self.data, self.cfg = data, cfg
        ss = np.random.SeedSequence(cfg.seed)
        init_seed, run_seed = ss.spawn(2)
        self.model = apply_ablation(cfg.ablation, data, cfg, np.random.default_rng(init_seed))
        self.objective = Objective(self.model, cfg)
        self.opt = gc.Adam(self.model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(run_seed)
        self.epoch = 0
        self.position = 0
        self.order = np.zeros(0, dtype=np.int64)
        self.history: list[dict] = []
        self.step_log: list[dict] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.data.fit) / self.cfg.batch_size)

    def _start_epoch(self) -> None:
        self.model.refresh_cache(self.epoch)
        self.order = self.rng.permutation(len(self.data.fit))
        self.position = 0

    def step(self) -> dict:
        """One optimizer step; starts a new epoch when the previous one is exhausted."""
        if self.position >= len(self.order):
            self._start_epoch()
        idx = self.order[self.position:self.position + self.cfg.batch_size]
        terms = self.objective(self.data.fit, idx, self.rng)
        rec = {"epoch": self.epoch, "step": self.opt.state.step, **terms.record()}
        if not math.isfinite(rec["total"]):
            raise DivergenceError(f"loss became {rec['total']} at epoch {self.epoch}", None)
        self.opt.zero_grad()
        gc.backward_pass(terms.total)
        skipped = self.opt.step()
        if skipped is not None:
            rec["skipped"] = True
        self.position += len(idx)
        self.step_log.append(rec)
        if self.position >= len(self.order):
            self.epoch += 1
        return rec

    def evaluate(self, ev: EventSet, threads: int = 1) -> evalkit.ScoredSamples:
        if self.model.use_cluster and (self.model.cache is None or "user" not in self.model.cache):
            self.model.refresh_cache(self.epoch)
        scores = self.model.predict(ev, threads=threads)
        return evalkit.ScoredSamples(ev.user, ev.item, scores, ev.label,
                                     self.data.user_tail[ev.user], self.data.item_tail[ev.item])

    def validation_records(self, train_loss: float | None) -> list[dict]:
        rep = evalkit.slice_report(self.evaluate(self.data.val), self.cfg.hash())
        recs = []
        for name in evalkit.SLICES:
            s = rep["slices"][name]
            recs.append({"epoch": self.epoch, "slice": name, "train_loss": train_loss,
                         "auc": s["auc"]["value"], "gauc": s["gauc"]["value"], "count": s["count"]})
        return recs

    def run(self, out: Path | None = None) -> list[dict]:
        """Train the remaining epochs, validating after each one (and once before any)."""
        if not self.history:
            self.history.extend(self.validation_records(None))
        last_good = self.state()
        while self.epoch < self.cfg.epochs:
            start_epoch = self.epoch
            losses = []
            try:
                while self.epoch == start_epoch:
                    losses.append(self.step()["main"])
            except DivergenceError as exc:
                if out is not None:
                    last_good.save(Path(out) / "checkpoint")
                raise DivergenceError(str(exc), last_good) from None
            self.history.extend(self.validation_records(float(np.mean(losses))))
            last_good = self.state()
            logger.info("epoch %d train L_main %.5f", self.epoch, float(np.mean(losses)))
        if out is not None:
            self.save(out)
        return self.history

    def save(self, out: Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        self.state().save(out / "checkpoint")
        with open(out / "metrics.jsonl", "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(out / "loss_terms.jsonl", "w") as fh:
            for rec in self.step_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def state(self) -> Checkpoint:
        st = self.opt.state
        cache = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in (self.model.cache or {}).items()}
        return Checkpoint(self.cfg.to_dict(), self.cfg.hash(), self.data.key, self.epoch, self.position,
                          self.order.copy(), {n: p.data.copy() for n, p in self.model.named_parameters()},
                          st.step, [m.copy() for m in st.m], [v.copy() for v in st.v], st.skipped,
                          json.loads(json.dumps(self.rng.bit_generator.state)), cache,
                          [dict(h) for h in self.history])

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.cfg.hash():
            raise ConfigError("checkpoint was written under a different config")
        if ckpt.data_key != self.data.key:
            raise ConfigError("checkpoint was written for different data")
        for name, p in self.model.named_parameters():
            p.data = ckpt.params[name].copy()
        st = self.opt.state
        st.step, st.skipped = ckpt.adam_step, ckpt.adam_skipped
        st.m = [m.copy() for m in ckpt.adam_m]
        st.v = [v.copy() for v in ckpt.adam_v]
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch, self.position, self.order = ckpt.epoch, ckpt.position, ckpt.order.copy()
        self.model.cache = dict(ckpt.cache) if ckpt.cache.get("epoch") is not None else None
        self.history = [dict(h) for h in ckpt.history]


def train(data: TrainingData, cfg: TrainConfig, out: Path | None = None) -> Trainer:
    trainer = Trainer(data, cfg)
    trainer.run(out)
    return trainer
