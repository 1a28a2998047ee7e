"""Command-line pipeline: gen -> align -> quantize -> train -> eval, plus ablate.

Every stage writes into ``<out>/<stage>/`` and finishes by writing that
directory's ``manifest.json``.  A downstream stage reads the manifests of the
stages it depends on and checks the recorded file digests, so a missing or
modified upstream output is reported as a dependency error.  All randomness
comes from one seed; each stage gets its own seed by hashing a fixed label
together with it.

Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 dependency.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
import warnings
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, align, evalkit, rqvae
from . import synthdata as sd
from . import trainer as tr

logger = logging.getLogger("tailtransfer")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DEPENDENCY = 0, 1, 2, 3
MANIFEST = "manifest.json"
SECTIONS = ("data", "align", "quantize", "train")
STAGE_INPUTS = {
    "data": (),
    "align": ("data",),
    "quantize": ("data", "align"),
    "train": ("data", "quantize"),
    "eval": ("data", "quantize", "train"),
    "ablate": ("data", "quantize"),
}
PRODUCER = {"data": "gen", "align": "align", "quantize": "quantize", "train": "train", "eval": "eval",
            "ablate": "ablate"}


class UsageError(Exception):
    pass


class DependencyError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AlignConfig:
    encoder: align.EncoderConfig = align.EncoderConfig()
    window: int = 3
    min_count: int = 1
    user_decay: float = 0.8


@dataclass(frozen=True)
class QuantizeConfig:
    """Per-kind quantizer settings; ``[quantize]`` keys apply to both, subtables override."""
    item: rqvae.QuantizerConfig = rqvae.QuantizerConfig()
    user: rqvae.QuantizerConfig = rqvae.QuantizerConfig()

    def for_kind(self, kind: str) -> rqvae.QuantizerConfig:
        return self.item if kind == "item" else self.user


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    data: sd.DataConfig = sd.DataConfig()
    align: AlignConfig = AlignConfig()
    quantize: QuantizeConfig = QuantizeConfig()
    train: tr.TrainConfig = tr.TrainConfig()

    def section(self, name: str) -> dict:
        return json.loads(json.dumps(asdict(getattr(self, name)), sort_keys=True))

    def section_hash(self, name: str) -> str:
        return _hash_json(self.section(name))


def _hash_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[{where}] {exc}") from exc


def parse_config(doc: dict) -> PipelineConfig:
    doc = dict(doc)
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    data = dict(doc.get("data", {}))
    click = _build(sd.ClickModel, data.pop("click", {}), "data.click")
    data_cfg = _build(sd.DataConfig, {**data, "click": click}, "data")
    al = dict(doc.get("align", {}))
    enc = _build(align.EncoderConfig, al.pop("encoder", {}), "align.encoder")
    align_cfg = _build(AlignConfig, {**al, "encoder": enc}, "align")
    q = dict(doc.get("quantize", {}))
    per_kind = {kind: dict(q.pop(kind, {})) for kind in ("item", "user")}
    kinds = {}
    for kind, override in per_kind.items():
        merged = {**q, **override}
        if merged.get("codebook_sizes") is not None:
            merged["codebook_sizes"] = tuple(merged["codebook_sizes"])
        kinds[kind] = _build(rqvae.QuantizerConfig, merged, f"quantize.{kind}")
    quant_cfg = QuantizeConfig(**kinds)
    if quant_cfg.item.levels != quant_cfg.user.levels:
        raise UsageError("users and items need the same number of quantization levels")
    train_doc = dict(doc.get("train", {}))
    if "seed" in train_doc:
        raise UsageError("[train] seed is derived from the top-level seed; set that instead")
    try:
        train_cfg = tr.TrainConfig.from_dict(train_doc)
        train_cfg.ablation.validate()
        train_cfg.transfer()
        quant_cfg.item.sizes()
        quant_cfg.user.sizes()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    for kind, qc in (("item", quant_cfg.item), ("user", quant_cfg.user)):
        if qc.dim_in != enc.dim_out:
            raise UsageError(f"quantize.{kind}.dim_in ({qc.dim_in}) must equal align.encoder.dim_out ({enc.dim_out})")
    if enc.dim_in != data_cfg.dim:
        raise UsageError(f"align.encoder.dim_in ({enc.dim_in}) must equal data.dim ({data_cfg.dim})")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise UsageError(f"seed must be a nonnegative integer, got {seed!r}")
    return PipelineConfig(seed, data_cfg, align_cfg, quant_cfg, train_cfg)


def load_config(path: str | None, seed: int | None = None) -> PipelineConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    if seed is not None:
        if seed < 0:
            raise UsageError(f"--seed must be nonnegative, got {seed}")
        doc["seed"] = seed
    return parse_config(doc)


def stage_seed(seed: int, label: str) -> int:
    """Per-stage seed from the run seed by labeled hashing."""
    digest = hashlib.sha256(f"tailtransfer/{label}/{seed}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# manifests


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _output_digests(stage_dir: Path) -> dict[str, str]:
    return {str(p.relative_to(stage_dir)): file_digest(p) for p in sorted(stage_dir.rglob("*"))
            if p.is_file() and p.name != MANIFEST}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def prepare_stage_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} is not empty; pass --force to overwrite it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(stage_dir: Path, *, command: str, config_path: str | None, seed: int,
                   stage_seed_value: int | None, config_hash: str, inputs: dict, started: str,
                   extra: dict | None = None) -> dict:
    doc = {
        "command": command,
        "stage": stage_dir.name,
        "config_path": str(Path(config_path).resolve()) if config_path else None,
        "config_hash": config_hash,
        "seed": seed,
        "stage_seed": stage_seed_value,
        "inputs": inputs,
        "outputs": _output_digests(stage_dir),
        "started_at": started,
        "finished_at": _now(),
        "versions": {"tailtransfer": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        **(extra or {}),
    }
    (stage_dir / MANIFEST).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc


def read_manifest(stage_dir: Path) -> dict:
    """Load and verify a stage manifest; any defect is a dependency error naming the stage."""
    stage = stage_dir.name
    hint = f"run `tailtransfer {PRODUCER.get(stage, stage)}` first"
    path = stage_dir / MANIFEST
    if not path.is_file():
        raise DependencyError(f"missing upstream stage '{stage}': no manifest in {stage_dir}; {hint}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DependencyError(f"stage '{stage}': unreadable manifest ({exc}); {hint}") from exc
    for rel, digest in doc.get("outputs", {}).items():
        f = stage_dir / rel
        if not f.is_file():
            raise DependencyError(f"stage '{stage}': output {rel} is missing; {hint}")
        if file_digest(f) != digest:
            raise DependencyError(f"stage '{stage}': output {rel} was modified after the stage ran; {hint}")
    return doc


def require(root: Path, stage: str) -> dict:
    return {up: read_manifest(root / up) for up in STAGE_INPUTS[stage]}


def _input_refs(manifests: dict) -> dict:
    return {name: {"config_hash": m["config_hash"], "manifest_sha256": _hash_json(m["outputs"])}
            for name, m in manifests.items()}


# ---------------------------------------------------------------------------
# stages


def _histories(events: sd.EventLog, num_users: int) -> list[list[int]]:
    users, items, _ = sd.click_sequences(events)
    hist: list[list[int]] = [[] for _ in range(num_users)]
    for u, i in zip(users.tolist(), items.tolist()):
        hist[u].append(i)
    return hist


def run_gen(cfg: PipelineConfig, root: Path) -> Path:
    out = root / "data"
    ds = sd.generate_dataset(cfg.data, stage_seed(cfg.seed, "data"))
    sd.write_dataset(out, ds)
    return out


def run_align(cfg: PipelineConfig, root: Path) -> Path:
    ds = sd.read_dataset(root / "data")
    train, _ = ds.split()
    pairs = sd.extract_cooccurrence(train, cfg.align.window, cfg.align.min_count)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", align.AlignmentSkippedWarning)
        items, history = align.train_item_encoder(ds.items.content_rep, pairs, cfg.align.encoder,
                                                  seed=stage_seed(cfg.seed, "align/items"))
    for w in caught:
        logger.warning("%s", w.message)
    users = align.derive_user_reps(_histories(train, len(ds.users)), items, ds.users.profile,
                                   cfg.align.user_decay, seed=stage_seed(cfg.seed, "align/users"))
    out = root / "align"
    align.write_reps(out / "item_reps.jsonl", items)
    align.write_reps(out / "user_reps.jsonl", users)
    (out / "align_loss.json").write_text(json.dumps({"epoch_loss": history, "pairs": int(len(pairs))},
                                                    sort_keys=True))
    return out


def run_quantize(cfg: PipelineConfig, root: Path) -> Path:
    ds = sd.read_dataset(root / "data")
    reps = {"item": align.read_reps(root / "align" / "item_reps.jsonl"),
            "user": align.read_reps(root / "align" / "user_reps.jsonl")}
    out = root / "quantize"
    models, maps, stats = {}, [], {}
    for kind in ("item", "user"):
        seed = stage_seed(cfg.seed, f"quantize/{kind}")
        qcfg = cfg.quantize.for_kind(kind)
        model, history = rqvae.train_rqvae(reps[kind].vectors, qcfg, seed=seed)
        id_map = rqvae.assign_semantic_ids(reps[kind].vectors, model, kind)
        models[kind] = (model, seed)
        maps.append(id_map)
        cats = ds.items.category if kind == "item" else None
        stats[kind] = {
            "levels": [rqvae.cluster_stats(rqvae.build_cluster_index(id_map, lv), cats)
                       for lv in range(1, qcfg.levels + 1)],
            "final_loss": history[-1] if history else None,
        }
        if cats is not None:
            stats[kind]["quality"] = evalkit.cluster_quality(id_map.ids, cats, model.encode(reps[kind].vectors),
                                                             seed=stage_seed(cfg.seed, "quantize/quality"))
    rqvae.write_codebooks(out / "codebooks.json", models)
    rqvae.write_semantic_ids(out / "semantic_ids.tsv", maps)
    (out / "cluster_stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1))
    return out


def load_training_data(cfg: PipelineConfig, root: Path) -> tr.TrainingData:
    ds = sd.read_dataset(root / "data")
    ids = rqvae.read_semantic_ids(root / "quantize" / "semantic_ids.tsv")
    if set(ids) != {"item", "user"}:
        raise DependencyError("stage 'quantize': semantic_ids.tsv must list users and items")
    t = cfg.train
    return tr.prepare_data(ds, ids["user"].ids, ids["item"].ids, t.seq_len, t.retrieve_cap, t.val_days)


def train_config(cfg: PipelineConfig, ablation: tr.Ablation | None = None) -> tr.TrainConfig:
    t = replace(cfg.train, seed=stage_seed(cfg.seed, "train"))
    return t if ablation is None else replace(t, ablation=ablation)


def comparability_key(data: tr.TrainingData, tcfg: tr.TrainConfig) -> str:
    return _hash_json({"data": data.key, "train": tcfg.hash(exclude_ablation=True)})


def evaluation_report(trainer: tr.Trainer, data: tr.TrainingData, threads: int = 1) -> tuple[dict, evalkit.ScoredSamples]:
    samples = trainer.evaluate(data.test, threads=threads)
    report = evalkit.slice_report(samples, trainer.cfg.hash())
    report["data_key"] = data.key
    report["comparability_key"] = comparability_key(data, trainer.cfg)
    report["ablation"] = trainer.cfg.ablation.active()
    return report, samples


def write_evaluation(out: Path, report: dict, samples: evalkit.ScoredSamples, title: str) -> None:
    evalkit.write_scores(out / "scores.tsv", samples)
    (out / "report.json").write_text(evalkit.dumps_report(report) + "\n")
    (out / "report.txt").write_text(evalkit.format_slice_table(report, title) + "\n")


def run_train(cfg: PipelineConfig, root: Path, data: tr.TrainingData | None = None,
              ablation: tr.Ablation | None = None, out: Path | None = None) -> tr.Trainer:
    data = data if data is not None else load_training_data(cfg, root)
    tcfg = train_config(cfg, ablation)
    out = out if out is not None else root / "train"
    (out / "config.json").write_text(json.dumps(tcfg.to_dict(), sort_keys=True, indent=1))
    return tr.train(data, tcfg, out)


def restore_trainer(cfg: PipelineConfig, root: Path, data: tr.TrainingData) -> tr.Trainer:
    train_dir = root / "train"
    doc = json.loads((train_dir / "config.json").read_text())
    tcfg = tr.TrainConfig.from_dict(doc)
    trainer = tr.Trainer(data, tcfg)
    try:
        trainer.restore(tr.Checkpoint.load(train_dir / "checkpoint"))
    except tr.ConfigError as exc:
        raise DependencyError(f"stage 'train': {exc}") from exc
    return trainer


def run_eval(cfg: PipelineConfig, root: Path, threads: int = 1) -> dict:
    data = load_training_data(cfg, root)
    trainer = restore_trainer(cfg, root, data)
    report, samples = evaluation_report(trainer, data, threads)
    write_evaluation(root / "eval", report, samples, "model")
    return report


ABLATE_RUNS = ("full",) + tr.ABLATIONS


def run_ablate(cfg: PipelineConfig, root: Path, threads: int = 1, *, config_path: str | None = None,
               inputs: dict | None = None) -> dict:
    data = load_training_data(cfg, root)
    out = root / "ablate"
    reports = {}
    for name in ABLATE_RUNS:
        started = _now()
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        flags = tr.Ablation() if name == "full" else tr.Ablation(**{name: True})
        logger.info("ablation run %s", name)
        trainer = run_train(cfg, root, data, flags, run_dir)
        report, samples = evaluation_report(trainer, data, threads)
        write_evaluation(run_dir, report, samples, name)
        write_manifest(run_dir, command=f"ablate:{name}", config_path=config_path, seed=cfg.seed,
                       stage_seed_value=trainer.cfg.seed, config_hash=trainer.cfg.hash(),
                       inputs=inputs or {}, started=started)
        reports[name] = report
    table = evalkit.ablation_report(reports["full"], {k: v for k, v in reports.items() if k != "full"})
    (out / "ablation.json").write_text(evalkit.dumps_report(table) + "\n")
    (out / "ablation.txt").write_text(evalkit.format_ablation_table(table) + "\n")
    return table


# ---------------------------------------------------------------------------
# entry point


def _stage_hash(cfg: PipelineConfig, stage: str) -> str:
    sections = {"data": ("data",), "align": ("data", "align"), "quantize": ("data", "align", "quantize"),
                "train": SECTIONS, "eval": SECTIONS, "ablate": SECTIONS}[stage]
    return _hash_json({"seed": cfg.seed, **{s: cfg.section(s) for s in sections}})


def execute(command: str, args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    root = Path(args.out)
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    stage = "data" if command == "gen" else command
    manifests = require(root, stage)
    stage_dir = prepare_stage_dir(root / stage, args.force)
    started = _now()
    inputs = _input_refs(manifests)
    labels = {"data": "data", "align": "align/items", "quantize": "quantize/item", "train": "train"}
    seed_value = stage_seed(cfg.seed, labels[stage]) if stage in labels else None
    extra: dict = {}
    if command == "gen":
        run_gen(cfg, root)
    elif command == "align":
        run_align(cfg, root)
    elif command == "quantize":
        run_quantize(cfg, root)
    elif command == "train":
        trainer = run_train(cfg, root)
        extra["train_config_hash"] = trainer.cfg.hash()
    elif command == "eval":
        report = run_eval(cfg, root, args.threads)
        print(evalkit.format_slice_table(report))
    elif command == "ablate":
        table = run_ablate(cfg, root, args.threads, config_path=args.config, inputs=inputs)
        print(evalkit.format_ablation_table(table))
    write_manifest(stage_dir, command=command, config_path=args.config, seed=cfg.seed,
                   stage_seed_value=seed_value, config_hash=_stage_hash(cfg, stage), inputs=inputs,
                   started=started, extra=extra)
    logger.info("%s finished: %s", command, stage_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailtransfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen": "generate the synthetic dataset", "align": "train the item encoder, derive user reps",
             "quantize": "train residual quantizers and assign semantic ids",
             "train": "train the CTR model", "eval": "score the test window and write report.json",
             "ablate": "train the full model and the six ablations, write the delta table"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="TOML config (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="run seed, overrides the config's top-level seed")
        p.add_argument("--out", default="run", help="workspace root holding one directory per stage")
        p.add_argument("--force", action="store_true", help="overwrite this stage's non-empty output")
        p.add_argument("--threads", type=int, default=1, help="evaluation threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return execute(args.command, args)
    except UsageError as exc:
        logger.error("usage: %s", exc)
        return EXIT_USAGE
    except DependencyError as exc:
        logger.error("dependency: %s", exc)
        return EXIT_DEPENDENCY
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        logger.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
