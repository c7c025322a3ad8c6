"""``bitsiam`` command line: surgery, pretraining, evaluation, embeddings, plots and data prep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from bitsiam import __version__
from bitsiam.backbone import NormKind, build_model
from bitsiam.checkpoint import Checkpoint, is_native_checkpoint, load_checkpoint, save_checkpoint
from bitsiam.config import RunConfig, config_to_dict, dump_config, load_config, with_overrides
from bitsiam.data import (
    HAM10000_MAJORITY,
    HAM_LIKE_PROFILE,
    CIFAR10_CLASSES,
    ImageArray,
    LabeledDataset,
    Manifest,
    ManifestEntry,
    SplitSpec,
    build_splits,
    channel_stats,
    load_cifar10,
    load_split,
    read_manifest,
    synth_dataset,
    write_manifest,
)
from bitsiam.errors import CheckpointError, ConfigError, TrainingAborted
from bitsiam.eval import (
    EvalReport,
    balanced_metrics,
    export_embeddings,
    extract_features,
    knn_predict,
    linear_evaluate,
)
from bitsiam.ssl_train import Monitor, PairDataset, pretrain, read_metrics, set_deterministic
from bitsiam.surgery import NameMap, convert_gn_to_bn, load_archive, load_backbone_weights, verify_surgery

log = logging.getLogger("bitsiam")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORTED = 0, 1, 2, 3
COLLAPSE_FACTOR = 0.02  # a run counts as collapsed when final collapse_std < COLLAPSE_FACTOR / sqrt(D)
NONDETERMINISM = [
    "multi-threaded CPU kernels may reorder float reductions across different thread counts",
    "CUDA kernels without deterministic implementations (use_deterministic_algorithms raises on them)",
    "mixed precision (never used in deterministic runs)",
]


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


@dataclass
class RunData:
    splits: Dict[str, ImageArray]
    class_names: List[str]
    mean: tuple
    std: tuple
    manifest: Optional[Manifest] = None


def load_run_data(cfg: RunConfig, splits: Sequence[str] = ("pretrain", "finetune", "val", "test")) -> RunData:
    d = cfg.data
    if d.source == "cifar10":
        train = load_cifar10(d.root, train=True, limit=d.limit, seed=cfg.seed)
        test = load_cifar10(d.root, train=False, limit=d.eval_limit, seed=cfg.seed)
        # unlabeled pretraining and the labeled kNN bank share the training subset
        arrays = {"pretrain": train, "finetune": train, "val": test, "test": test}
        mean, std = channel_stats(train)
        return RunData({s: arrays[s] for s in splits}, list(CIFAR10_CLASSES), mean, std)

    manifest = read_manifest(d.manifest)
    if d.split is not None:
        manifest = build_splits(manifest, d.split)
    arrays = {}
    for s in splits:
        arr = load_split(manifest, s, d.image_size, d.skip_undecodable)
        if d.limit is not None and s == "pretrain":
            arr = arr.subset(range(min(d.limit, len(arr))))
        arrays[s] = arr
    if manifest.mean is not None:
        mean, std = manifest.mean, manifest.std
    else:
        base = arrays.get("pretrain")
        if base is None or len(base) == 0:
            base = load_split(manifest, "pretrain", d.image_size, d.skip_undecodable)
        mean, std = channel_stats(base) if len(base) else ((0.5,) * 3, (0.5,) * 3)
    return RunData(arrays, list(manifest.class_names), tuple(mean), tuple(std), manifest)


def _labeled(data: RunData, split: str) -> LabeledDataset:
    return LabeledDataset(data.splits[split], data.mean, data.std)


def _name_map(spec: str) -> NameMap:
    if spec == "bit_resnetv2":
        return NameMap.bit_resnetv2()
    if spec == "identity":
        return NameMap.identity()
    return NameMap.load(spec)


def _backbone_checkpoint(model, cfg: RunConfig, extra=None) -> Checkpoint:
    b = cfg.backbone
    meta = {"kind": "backbone", "norm_kind": b.norm.value, "arch": f"resnetv2-{b.depth}",
            "depth": str(b.depth), "width_mult": str(b.width_mult), "stem": b.stem.value,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    meta.update(extra or {})
    return Checkpoint.from_state_dict(model.state_dict(), meta)


def load_backbone_from(path, cfg: RunConfig):
    """Backbone for ``cfg`` with weights from a run directory, a training state or a backbone checkpoint."""
    path = Path(path)
    if path.is_dir():
        path = path / "backbone.ckpt"
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    backbone = build_model(cfg.backbone)
    if not is_native_checkpoint(path):
        ckpt = load_archive(path)
    else:
        ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") == "train_state":
        prefix = "model.backbone."
        ckpt = Checkpoint({k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}, ckpt.meta)
    load_backbone_weights(backbone, ckpt)
    return backbone


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _fresh_dir(path: Path):
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {path} exists and is not empty; run directories are immutable")
    path.mkdir(parents=True, exist_ok=True)


def _next_generation(run_dir: Path) -> Path:
    base = run_dir.name.split(".gen")[0]
    n = 2
    while (run_dir.parent / f"{base}.gen{n}").exists():
        n += 1
    return run_dir.parent / f"{base}.gen{n}"


def _latest_state(run_dir: Path) -> Path:
    states = sorted((run_dir / "checkpoints").glob("state_*.ckpt"))
    if not states:
        raise CheckpointError(f"no training state found under {run_dir / 'checkpoints'}")
    return states[-1]


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.setLevel(logging.INFO)
    logger = logging.getLogger("bitsiam")
    logger.addHandler(handler)
    # the run log records INFO even when the caller has not configured logging
    if logger.getEffectiveLevel() > logging.INFO:
        logger.setLevel(logging.INFO)
    return handler


def _init_weights(model, cfg: RunConfig) -> dict:
    """Apply ``cfg.init``; returns the init summary recorded in report.json."""
    init = cfg.init
    if init.kind == "scratch":
        log.info("init: scratch")
        return {"kind": "scratch"}
    src = load_archive(init.checkpoint, _name_map(init.name_map))
    if cfg.backbone.norm is NormKind.GROUP_WS:
        load_backbone_weights(model.backbone, src)
        log.info("init: loaded %s into a GroupNorm+WS backbone without conversion", init.checkpoint)
        return {"kind": "surgery", "checkpoint": init.checkpoint, "converted": False}
    dst = convert_gn_to_bn(src, cfg.backbone, bake_ws=init.bake_ws)
    report = verify_surgery(src, dst, cfg.backbone)
    for line in report.summary().splitlines():
        log.info(line)
    if not report.passed:
        raise CheckpointError("weight surgery failed verification:\n" + report.summary())
    load_backbone_weights(model.backbone, dst)
    return {"kind": "surgery", "checkpoint": init.checkpoint, "converted": True, "bake_ws": init.bake_ws,
            "stem": dst.meta.get("stem", "converted"), "verify": report.to_dict()}


def cmd_pretrain(cfg: RunConfig, resume=None, config_source: Optional[Path] = None) -> Path:
    """Surgery (if configured) then pretraining; returns the run directory."""
    resume_state = None
    if resume is not None:
        resume = Path(resume)
        resume_state = _latest_state(resume) if resume.is_dir() else resume
        if not resume_state.is_file():
            raise CheckpointError(f"resume state not found: {resume_state}")
        prev_run = resume_state.parent.parent
        run_dir = Path(cfg.output_dir) if cfg.output_dir else prev_run
        if run_dir.resolve() == prev_run.resolve():
            run_dir = _next_generation(prev_run)
    else:
        if not cfg.output_dir:
            raise ConfigError("no output directory: set output_dir in the config or pass --out")
        run_dir = Path(cfg.output_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigError(f"output directory {run_dir} exists and is not empty; run directories are immutable")

    data = load_run_data(cfg)
    if len(data.splits["pretrain"]) < 2:
        raise ConfigError("the pretrain split has fewer than 2 images")

    set_deterministic(cfg.seed, cfg.deterministic)
    model = build_model(cfg.backbone, cfg.head)

    _fresh_dir(run_dir)
    handler = _attach_log(run_dir)
    try:
        dump_config(cfg, run_dir / "config.yaml")
        if config_source is not None:
            shutil.copyfile(config_source, run_dir / "config.source.yaml")
        if data.manifest is not None:
            m = data.manifest
            absolute = [ManifestEntry(str(m.resolve(e)), e.label, e.split) for e in m.entries]
            write_manifest(Manifest(absolute, m.class_names, None, data.mean, data.std), run_dir / "manifest.csv")
        init_summary = {"kind": "resume", "state": str(resume_state)} if resume_state else _init_weights(model, cfg)

        monitor = None
        if cfg.monitor.enabled:
            monitor = Monitor(_labeled(data, cfg.monitor.bank_split), _labeled(data, cfg.monitor.query_split),
                              len(data.class_names), cfg.monitor.k, cfg.monitor.temperature)
        dataset = PairDataset(data.splits["pretrain"], cfg.data.policy, cfg.seed, data.mean, data.std,
                              size=cfg.data.image_size)
        report = {
            "version": __version__,
            "seed": cfg.seed,
            "deterministic": cfg.deterministic,
            "init": init_summary,
            "feature_dim": cfg.backbone.feature_dim,
            "collapse_dim": cfg.head.projector_dim,
            "class_names": data.class_names,
            "mean": list(data.mean),
            "std": list(data.std),
            "split_sizes": {s: len(a) for s, a in data.splits.items()},
            "nondeterminism_sources": NONDETERMINISM,
        }
        try:
            result = pretrain(model, dataset, cfg.optimizer, monitor, out_dir=run_dir, seed=cfg.seed,
                              device=cfg.device, resume_from=resume_state, num_workers=cfg.data.num_workers,
                              state_meta={"run_config": json.dumps(config_to_dict(cfg), sort_keys=True)})
        except TrainingAborted as e:
            report.update(status="aborted", error=str(e), state=str(e.state_path) if e.state_path else None)
            (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
            raise
        save_checkpoint(_backbone_checkpoint(model.backbone, cfg, {"source": "pretrain", "epochs": str(len(result.records))}),
                        run_dir / "backbone.ckpt")
        final = result.records[-1]
        report.update(
            status="completed",
            epochs=len(result.records),
            final={k: _num(v) for k, v in vars(final).items()},
            collapsed=_is_collapsed(final.collapse_std, cfg.head.projector_dim),
            checkpoints=[str(p.relative_to(run_dir)) for p in result.checkpoints],
        )
        (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        log.info("run complete: %s", run_dir)
    finally:
        logging.getLogger("bitsiam").removeHandler(handler)
        handler.close()
    return run_dir


def _num(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def _is_collapsed(value: float, dim: int) -> bool:
    return math.isfinite(value) and value < COLLAPSE_FACTOR / math.sqrt(dim)


def knn_report(backbone, data: RunData, cfg: RunConfig) -> EvalReport:
    bank = extract_features(backbone, _labeled(data, "finetune"), device=cfg.device)
    query = extract_features(backbone, _labeled(data, "test"), device=cfg.device)
    if len(bank[1]) == 0 or len(query[1]) == 0:
        raise ValueError("kNN evaluation needs non-empty finetune and test splits")
    k = min(cfg.monitor.k, len(bank[1]))
    preds = knn_predict(bank[0], bank[1], query[0], k, cfg.monitor.temperature, len(data.class_names))
    m = balanced_metrics(preds, query[1], len(data.class_names))
    report = EvalReport(m.balanced_accuracy, m.macro_f1, m.per_class_recall.tolist(), [], math.nan,
                        m.excluded_classes, data.class_names, mode="knn")
    report.confusion = m.confusion
    return report


def _write_confusion(path, confusion, class_names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, confusion):
            w.writerow([name] + [int(v) for v in row])


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def bar_chart(path, entries: Dict[str, dict]):
    """Grouped bars of balanced accuracy and macro F1 per labeled report."""
    plt = _plt()
    labels = list(entries)
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(labels)), 3.5))
    bacc = [entries[k]["balanced_accuracy"] for k in labels]
    f1 = [entries[k]["macro_f1"] for k in labels]
    ax.bar(x - 0.2, bacc, 0.4, label="balanced accuracy")
    ax.bar(x + 0.2, f1, 0.4, label="macro F1")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _read_report(spec: str) -> tuple:
    label, _, target = spec.rpartition("=")
    p = Path(target)
    if p.is_dir():
        p = p / "report.json"
    doc = json.loads(p.read_text())
    if "balanced_accuracy" not in doc:
        raise ValueError(f"{p} is not an evaluation report")
    return label or p.parent.name, doc


def cmd_eval(cfg: RunConfig, checkpoint, mode: str = "linear", out=None, trials: Optional[int] = None,
             compare: Sequence[str] = (), label: Optional[str] = None) -> Path:
    if mode not in ("knn", "linear", "both"):
        raise ConfigError(f"--mode must be knn, linear or both, got {mode!r}")
    if trials is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, trials=trials).validate())
    out = Path(out or cfg.output_dir or ".")
    backbone = load_backbone_from(checkpoint, cfg)
    compared = [_read_report(c) for c in compare]
    data = load_run_data(cfg, ("pretrain", "finetune", "val", "test"))
    run_report = Path(checkpoint) / "report.json" if Path(checkpoint).is_dir() else None
    if run_report is not None and run_report.is_file():
        prev = json.loads(run_report.read_text())
        data.mean, data.std = tuple(prev["mean"]), tuple(prev["std"])
    set_deterministic(cfg.seed, cfg.deterministic)
    out.mkdir(parents=True, exist_ok=True)

    reports = {}
    if mode in ("knn", "both"):
        reports["knn"] = knn_report(backbone, data, cfg)
    if mode in ("linear", "both"):
        datasets = {s: _labeled(data, s) for s in ("finetune", "val", "test")}
        rep = linear_evaluate(backbone, datasets, cfg.eval, len(data.class_names), data.class_names, cfg.device)
        rep.confusion = np.sum([t.test_confusion for t in rep.trials], axis=0)
        reports["linear"] = rep
    for name, rep in reports.items():
        rep.to_json(out / f"report_{name}.json")
        _write_confusion(out / f"confusion_{name}.csv", rep.confusion, data.class_names)
        log.info("%s: balanced accuracy %.4f, macro F1 %.4f", name, rep.balanced_accuracy, rep.macro_f1)
    primary = reports.get("linear") or reports["knn"]
    primary.to_json(out / "report.json")

    label = label or Path(checkpoint).name
    entries = {f"{label} ({name})": {"balanced_accuracy": r.balanced_accuracy, "macro_f1": r.macro_f1}
               for name, r in reports.items()}
    for lab, doc in compared:
        entries[lab] = doc
    bar_chart(out / "comparison.png", entries)
    return out


def cmd_plot(run_dirs: Sequence, out, labels: Optional[Sequence[str]] = None) -> Dict[str, Path]:
    """Accuracy, loss and collapse curves overlaid across runs."""
    if not run_dirs:
        raise ConfigError("plot needs at least one run directory")
    labels = list(labels or [Path(r).name for r in run_dirs])
    if len(labels) != len(run_dirs):
        raise ConfigError("--labels must match the number of run directories")
    series = []
    for run, lab in zip(run_dirs, labels):
        run = Path(run)
        records = read_metrics(run / "metrics.csv")
        if not records:
            raise ValueError(f"{run / 'metrics.csv'} has no rows")
        dim = _collapse_dim(run)
        series.append((lab, records, dim, _is_collapsed(records[-1].collapse_std, dim) if dim else False))

    plt = _plt()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, ylabel in (("knn_balanced_acc", "kNN balanced accuracy"), ("loss", "training loss"),
                        ("collapse_std", "collapse std")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for lab, records, dim, collapsed in series:
            epochs = [r.epoch for r in records]
            values = [getattr(r, key) for r in records]
            ax.plot(epochs, values, label=f"{lab} (collapsed)" if collapsed else lab)
            if collapsed:
                ax.annotate("collapsed", (epochs[-1], values[-1]), textcoords="offset points", xytext=(-40, 8))
        if key == "collapse_std":
            for dim in sorted({s[2] for s in series if s[2]}):
                ax.axhline(1 / math.sqrt(dim), ls="--", lw=0.8, color="gray")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        name = {"knn_balanced_acc": "accuracy", "loss": "loss", "collapse_std": "collapse"}[key]
        paths[name] = out / f"{name}.png"
        fig.savefig(paths[name], dpi=120, bbox_inches="tight")
        plt.close(fig)
    collapsed = [s[0] for s in series if s[3]]
    (out / "plot_summary.json").write_text(json.dumps({"series": labels, "collapsed": collapsed}, indent=2) + "\n")
    return paths


def _collapse_dim(run: Path) -> Optional[int]:
    report = run / "report.json"
    if report.is_file():
        dim = json.loads(report.read_text()).get("collapse_dim")
        if dim:
            return int(dim)
    config = run / "config.yaml"
    if config.is_file():
        return load_config(config, check_paths=False).head.projector_dim
    return None


def cmd_embed(cfg: RunConfig, checkpoint, out, split: str = "test") -> Dict[str, Path]:
    backbone = load_backbone_from(checkpoint, cfg)
    data = load_run_data(cfg, (split,))
    arr = data.splits[split]
    if len(arr) < 2:
        raise ValueError(f"split {split!r} has fewer than 2 images")
    majority = HAM10000_MAJORITY if HAM10000_MAJORITY in data.class_names else None
    return export_embeddings(backbone, LabeledDataset(arr, data.mean, data.std), out, data.class_names,
                             arr.ids, majority, cfg.seed, cfg.device, Path(checkpoint).name)


def cmd_surgeon_convert(src_path, dst_path, cfg: RunConfig, bake_ws: bool = False, name_map="bit_resnetv2") -> Path:
    src = load_archive(src_path, _name_map(name_map))
    dst = convert_gn_to_bn(src, cfg.backbone.with_norm(NormKind.BATCH), bake_ws=bake_ws)
    report = verify_surgery(src, dst, cfg.backbone.with_norm(NormKind.BATCH))
    print(report.summary())
    if not report.passed:
        raise CheckpointError("conversion produced a checkpoint that fails verification")
    return save_checkpoint(dst, dst_path)


def cmd_surgeon_verify(src_path, dst_path, cfg: RunConfig, name_map="bit_resnetv2") -> bool:
    src = load_archive(src_path, _name_map(name_map))
    dst = load_checkpoint(dst_path)
    report = verify_surgery(src, dst, cfg.backbone.with_norm(NormKind.BATCH))
    print(report.summary())
    return report.passed


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(sub: argparse.ArgumentParser):
    g = sub.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="YAML run config")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory or file")
    g.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitsiam", description=__doc__)
    p.add_argument("--version", action="version", version=f"bitsiam {__version__}")
    _common(p)
    sub = p.add_subparsers(dest="command", required=True)

    surgeon = sub.add_parser("surgeon", help="GroupNorm+WS -> BatchNorm checkpoint surgery")
    ssub = surgeon.add_subparsers(dest="action", required=True)
    conv = ssub.add_parser("convert", help="convert a pretrained archive")
    conv.add_argument("source")
    conv.add_argument("--bake-ws", action="store_true")
    conv.add_argument("--name-map", default="bit_resnetv2", help="bit_resnetv2, identity or a JSON map file")
    _common(conv)
    ver = ssub.add_parser("verify", help="check a converted checkpoint against its source")
    ver.add_argument("source")
    ver.add_argument("converted")
    ver.add_argument("--name-map", default="bit_resnetv2")
    _common(ver)

    pre = sub.add_parser("pretrain", help="SimSiam pretraining run")
    pre.add_argument("--resume", help="run directory or training-state checkpoint to continue from")
    _common(pre)

    ev = sub.add_parser("eval", help="kNN / linear evaluation of a frozen backbone")
    ev.add_argument("--checkpoint", required=True, help="run directory, training state or backbone checkpoint")
    ev.add_argument("--mode", choices=("knn", "linear", "both"), default="linear")
    ev.add_argument("--trials", type=int)
    ev.add_argument("--label")
    ev.add_argument("--compare", nargs="*", default=[], metavar="[LABEL=]REPORT",
                    help="other report.json files or eval directories to include in the bar chart")
    _common(ev)

    pl = sub.add_parser("plot", help="training curves across runs")
    pl.add_argument("runs", nargs="+")
    pl.add_argument("--labels", nargs="*")
    _common(pl)

    em = sub.add_parser("embed", help="feature and t-SNE export")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--split", default="test")
    _common(em)

    sd = sub.add_parser("synth-data", help="write a synthetic class-conditional image set")
    sd.add_argument("--n", type=int, default=700)
    sd.add_argument("--classes", type=int, default=7)
    sd.add_argument("--size", type=int, default=32)
    sd.add_argument("--profile", choices=("ham", "uniform"), default="ham")
    _common(sd)

    sp = sub.add_parser("split", help="assign pretrain/finetune/val/test splits to a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--fractions", help="comma-separated pretrain,finetune,val,test fractions")
    sp.add_argument("--alternate", action="store_true", help="60/20/0/20 layout without a validation split")
    sp.add_argument("--stratified", action="store_true")
    _common(sp)
    return p


def _run_config(args, required: bool = True, check_paths: bool = True) -> RunConfig:
    path = getattr(args, "config", None)
    if path is None:
        if required:
            raise ConfigError(f"{args.command} needs --config")
        cfg = RunConfig()
    else:
        cfg = load_config(path, check_paths)
    return with_overrides(cfg, getattr(args, "seed", None), getattr(args, "out", None),
                          getattr(args, "deterministic", None))


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "surgeon":
        cfg = _run_config(args, check_paths=False)
        if args.action == "convert":
            if not getattr(args, "out", None):
                raise ConfigError("surgeon convert needs --out")
            cmd_surgeon_convert(args.source, args.out, cfg, args.bake_ws, args.name_map)
            return EXIT_OK
        return EXIT_OK if cmd_surgeon_verify(args.source, args.converted, cfg, args.name_map) else EXIT_FAIL
    if cmd == "pretrain":
        if getattr(args, "config", None) is None and args.resume:
            state_dir = Path(args.resume)
            run_dir = state_dir if state_dir.is_dir() else state_dir.parent.parent
            args.config = str(run_dir / "config.yaml")
        cfg = _run_config(args)
        run_dir = cmd_pretrain(cfg, args.resume, Path(args.config))
        print(run_dir)
        return EXIT_OK
    if cmd == "eval":
        out = cmd_eval(_run_config(args), args.checkpoint, args.mode, getattr(args, "out", None), args.trials,
                       args.compare, args.label)
        print(out / "report.json")
        return EXIT_OK
    if cmd == "plot":
        if not getattr(args, "out", None):
            raise ConfigError("plot needs --out")
        for path in cmd_plot(args.runs, args.out, args.labels).values():
            print(path)
        return EXIT_OK
    if cmd == "embed":
        cfg = _run_config(args)
        if not getattr(args, "out", None):
            raise ConfigError("embed needs --out")
        for path in cmd_embed(cfg, args.checkpoint, args.out, args.split).values():
            print(path)
        return EXIT_OK
    if cmd == "synth-data":
        if not getattr(args, "out", None):
            raise ConfigError("synth-data needs --out")
        profile = HAM_LIKE_PROFILE if args.profile == "ham" else None
        m = synth_dataset(args.out, args.n, args.classes, args.size, getattr(args, "seed", 0), profile)
        print(Path(args.out) / "manifest.csv", f"({len(m)} images)")
        return EXIT_OK
    if cmd == "split":
        return _split(args)
    raise ConfigError(f"unknown command {cmd}")


def _split(args) -> int:
    seed = getattr(args, "seed", 0)
    if getattr(args, "config", None):
        cfg = load_config(args.config, check_paths=False)
        spec = cfg.data.split or SplitSpec(seed=seed)
    elif args.alternate:
        spec = SplitSpec.alternate(seed, args.stratified)
    elif args.fractions:
        try:
            fractions = tuple(float(v) for v in args.fractions.split(","))
        except ValueError:
            raise ConfigError(f"--fractions: not a comma-separated list of numbers: {args.fractions!r}") from None
        spec = SplitSpec(fractions, seed, args.stratified)
    else:
        spec = SplitSpec(seed=seed, stratified=args.stratified)
    spec.validate()
    out = getattr(args, "out", None)
    if not out:
        raise ConfigError("split needs --out")
    src = read_manifest(args.manifest)
    out = Path(out)
    if out.resolve().parent != Path(args.manifest).resolve().parent:
        src = Manifest([ManifestEntry(str(src.resolve(e)), e.label, e.split) for e in src.entries],
                       src.class_names, None, src.mean, src.std)
    out.parent.mkdir(parents=True, exist_ok=True)
    m = build_splits(src, spec)
    write_manifest(m, out)
    print(out, json.dumps(m.split_sizes()))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("bitsiam").setLevel(logging.INFO)
    try:
        return _dispatch(args)
    except TrainingAborted as e:
        print(f"error: {e} (diagnostic state: {e.state_path})", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (ConfigError, FileNotFoundError)) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
