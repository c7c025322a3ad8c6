"""SimSiam pretraining: paired views, stop-gradient loss, cosine-decayed SGD, per-epoch monitors."""

from __future__ import annotations

import contextlib
import csv
import fnmatch
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import v2

from bitsiam.backbone import SimSiam
from bitsiam.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from bitsiam.data import ImageArray
from bitsiam.errors import CheckpointError, ConfigError, TrainingAborted
from bitsiam.eval import collapse_std, knn_evaluate

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "loss", "lr", "knn_balanced_acc", "collapse_std")
STATE_VERSION = "1"
# sample index reserved for the per-epoch shuffle seed
_SHUFFLE_TAG = 2**31 - 1


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    size: int
    crop_scale: Tuple[float, float] = (0.2, 1.0)
    flip_p: float = 0.5
    jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p: float = 0.0
    identity: bool = False

    def validate(self) -> "AugmentConfig":
        if self.size < 1 and not self.identity:
            raise ConfigError(f"augmentation size must be positive, got {self.size}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("flip_p", "jitter_p", "grayscale_p", "blur_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")
        return self


POLICIES = ("natural-224", "cifar-32", "identity")


def resolve_policy(policy, size: Optional[int] = None) -> AugmentConfig:
    """Named policy (or a ready ``AugmentConfig``) -> ``AugmentConfig``.

    ``identity`` only resizes; it exists for loss tests. Its size defaults to the source size.
    """
    if isinstance(policy, AugmentConfig):
        return policy.validate()
    if policy == "natural-224":
        return AugmentConfig(size or 224, blur_p=0.5).validate()
    if policy == "cifar-32":
        return AugmentConfig(size or 32).validate()
    if policy == "identity":
        return AugmentConfig(size or 0, identity=True)
    raise ConfigError(f"unknown augmentation policy {policy!r}; expected one of {POLICIES}")


def _transform(cfg: AugmentConfig, size: int):
    if cfg.identity:
        return v2.Resize((size, size), antialias=True)
    ops = [
        v2.RandomResizedCrop(size, scale=cfg.crop_scale, antialias=True),
        v2.RandomHorizontalFlip(cfg.flip_p),
        v2.RandomApply([v2.ColorJitter(*cfg.jitter)], p=cfg.jitter_p),
        v2.RandomGrayscale(cfg.grayscale_p),
    ]
    if cfg.blur_p > 0:
        kernel = max(3, int(0.1 * size) // 2 * 2 + 1)
        ops.append(v2.RandomApply([v2.GaussianBlur(kernel, sigma=(0.1, 2.0))], p=cfg.blur_p))
    return v2.Compose(ops)


def _as_chw_uint8(image) -> torch.Tensor:
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                image = np.asarray(im.convert("RGB"))
        except OSError as e:
            raise OSError(f"cannot decode image {image}: {e}") from e
    elif isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    if isinstance(image, torch.Tensor) and image.ndim == 3 and image.shape[0] == 3:
        return image
    raise TypeError(f"unsupported image type {type(image).__name__}")


class ViewPair(NamedTuple):
    view1: torch.Tensor
    view2: torch.Tensor
    source_id: int
    seed: int


def augment_pair(image, policy="cifar-32", seed: int = 0, mean=None, std=None, source_id: int = -1,
                 size: Optional[int] = None) -> ViewPair:
    """Two independently augmented float views of one image; identical output for identical ``seed``."""
    src = _as_chw_uint8(image)
    cfg = resolve_policy(policy, size)
    out = cfg.size or src.shape[-1]
    tf = _transform(cfg, out)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        views = [tf(src), tf(src)]
    views = [v.float() / 255.0 for v in views]
    if mean is not None:
        m = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
        s = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
        views = [(v - m) / s for v in views]
    return ViewPair(views[0], views[1], source_id, seed)


def sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class PairDataset(Dataset):
    """Yields ``(view1, view2)``; each sample's augmentation seed depends only on (seed, epoch, index)."""

    def __init__(self, images: ImageArray, policy="cifar-32", seed: int = 0, mean=None, std=None,
                 size: Optional[int] = None):
        self.images = images
        self.cfg = resolve_policy(policy, size)
        self.seed = seed
        self.mean, self.std = mean, std
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.images)

    def pair(self, i: int) -> ViewPair:
        return augment_pair(self.images.images[i], self.cfg, sample_seed(self.seed, self.epoch, i),
                            self.mean, self.std, source_id=i)

    def __getitem__(self, i):
        p = self.pair(i)
        return p.view1, p.view2


# ---------------------------------------------------------------------------
# Loss and schedule
# ---------------------------------------------------------------------------


def _check_rows(x: torch.Tensor, name: str):
    if x.ndim != 2:
        raise ValueError(f"{name} must be [B, D], got {tuple(x.shape)}")
    if bool((x.detach().norm(dim=1) == 0).any()):
        raise ValueError(f"{name} has a zero-norm row; cosine is undefined")


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """D(p, z) = -mean cos(p_i, z_i), with the gradient into ``z`` blocked."""
    z = z.detach()
    return -(F.normalize(p, dim=1) * F.normalize(z, dim=1)).sum(dim=1).mean()


def simsiam_loss(p1, p2, z1, z2) -> torch.Tensor:
    """Symmetrized stop-gradient loss ``0.5 D(p1, z2) + 0.5 D(p2, z1)``; value in [-1, 1]."""
    shape = p1.shape
    for name, t in (("p1", p1), ("p2", p2), ("z1", z1), ("z2", z2)):
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {name} is {tuple(t.shape)}, p1 is {tuple(shape)}")
        _check_rows(t, name)
    return 0.5 * negative_cosine(p1, z2) + 0.5 * negative_cosine(p2, z1)


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.03
    batch_size: int = 128
    weight_decay: float = 0.0005
    momentum: float = 0.9
    epochs: int = 400
    mixed_precision: bool = False
    save_every: int = 10
    wd_exclude: Tuple[str, ...] = ()

    @property
    def scaled_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def validate(self) -> "OptimConfig":
        for name in ("base_lr", "batch_size", "momentum", "epochs", "save_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"optimizer.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError("optimizer.batch_size must be at least 2 (batch statistics)")
        return self


def lr_at(t: float, cfg: OptimConfig) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"schedule position must be in [0, 1], got {t}")
    return cfg.scaled_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def decay_parameters(model: nn.Module, cfg: OptimConfig) -> Tuple[List[str], List[str]]:
    """Names of parameters with and without weight decay; only ``cfg.wd_exclude`` globs are exempt."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if any(fnmatch.fnmatch(name, pat) for pat in cfg.wd_exclude) else decay).append(name)
    return decay, no_decay


def build_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.SGD:
    decay, no_decay = decay_parameters(model, cfg)
    params = dict(model.named_parameters())
    groups = [{"params": [params[n] for n in decay], "weight_decay": cfg.weight_decay}]
    if no_decay:
        groups.append({"params": [params[n] for n in no_decay], "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=cfg.scaled_lr, momentum=cfg.momentum)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainRecord:
    epoch: int
    loss: float
    lr: float
    knn_balanced_acc: float
    collapse_std: float

    def row(self):
        return [str(self.epoch), repr(float(self.loss)), repr(float(self.lr)),
                repr(float(self.knn_balanced_acc)), repr(float(self.collapse_std))]


@dataclass
class Monitor:
    """Per-epoch kNN/collapse probe: ``bank`` is labeled reference data, ``query`` is scored against it.

    Both are datasets of ``(image, label)``. Collapse is measured on the query set's projections.
    """

    bank: Optional[Dataset] = None
    query: Optional[Dataset] = None
    num_classes: int = 0
    k: int = 20
    temperature: float = 0.07
    batch_size: int = 256


@dataclass
class TrainResult:
    model: nn.Module
    records: List[TrainRecord]
    checkpoints: List[Path] = field(default_factory=list)


def set_deterministic(seed: int, enabled: bool = True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=False)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


@torch.no_grad()
def _monitor_outputs(model: SimSiam, dataset, batch_size: int, device):
    feats, projs, labels = [], [], []
    for x, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        h = model.backbone(x.to(device))
        feats.append(h.float().cpu())
        projs.append(model.projector(h).float().cpu())
        labels.append(torch.as_tensor(y))
    return torch.cat(feats).numpy(), torch.cat(projs).numpy(), torch.cat(labels).numpy()


def run_monitor(model: SimSiam, monitor: Optional[Monitor], device="cpu") -> Tuple[float, float]:
    """(kNN balanced accuracy, collapse_std) with the model in eval mode; NaN where not configured."""
    if monitor is None or monitor.query is None or len(monitor.query) == 0:
        return math.nan, math.nan
    was_training = model.training
    model.eval()
    try:
        q_feats, q_proj, q_labels = _monitor_outputs(model, monitor.query, monitor.batch_size, device)
        knn = math.nan
        if monitor.bank is not None and len(monitor.bank) > 0:
            b_feats, _, b_labels = _monitor_outputs(model, monitor.bank, monitor.batch_size, device)
            knn = knn_evaluate(b_feats, b_labels, q_feats, q_labels, monitor.num_classes,
                               monitor.k, monitor.temperature).balanced_accuracy
        try:
            cstd = collapse_std(q_proj)
        except ValueError:
            # a projection collapsed onto the origin is as collapsed as it gets
            cstd = 0.0
    finally:
        model.train(was_training)
    return float(knn), float(cstd)


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    gen = torch.Generator().manual_seed(sample_seed(seed, epoch, _SHUFFLE_TAG))
    order = torch.randperm(n, generator=gen)
    out = [order[i: i + batch_size].tolist() for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a single-sample batch has no batch statistics
        out.pop()
    return out


def save_state(path, model: nn.Module, opt: torch.optim.Optimizer, epoch: int, records: Sequence[TrainRecord],
               cfg: OptimConfig, seed: int, extra_meta: Optional[Dict[str, str]] = None) -> Path:
    """Full training state: model tensors, SGD momentum buffers, records so far."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            buf = opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                tensors[f"optim.momentum.{names[id(p)]}"] = buf
    meta = {
        "kind": "train_state",
        "state_version": STATE_VERSION,
        "epoch": str(epoch),
        "seed": str(seed),
        "optim": json.dumps(asdict(cfg), sort_keys=True),
        "records": json.dumps([asdict(r) for r in records]),
    }
    meta.update(extra_meta or {})
    return save_checkpoint(Checkpoint.from_state_dict(tensors, meta), path)


def load_state(path, model: nn.Module, opt: torch.optim.Optimizer) -> Tuple[int, List[TrainRecord], Dict[str, str]]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training state")
    if ckpt.meta.get("state_version") != STATE_VERSION:
        raise CheckpointError(f"{path}: state version {ckpt.meta.get('state_version')!r}, expected {STATE_VERSION!r}")
    state = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    params = dict(model.named_parameters())
    for k, v in ckpt.tensors.items():
        if k.startswith("optim.momentum."):
            name = k[len("optim.momentum."):]
            if name not in params:
                raise CheckpointError(f"{path}: momentum buffer for unknown parameter {name}")
            p = params[name]
            opt.state[p]["momentum_buffer"] = torch.from_numpy(v.copy()).to(p.device)
    records = [TrainRecord(**r) for r in json.loads(ckpt.meta["records"])]
    return int(ckpt.meta["epoch"]), records, ckpt.meta


def write_metrics(path, records: Sequence[TrainRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())
    return path


def read_metrics(path) -> List[TrainRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(METRICS_HEADER)}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(METRICS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(row)}")
            try:
                out.append(TrainRecord(int(row[0]), *(float(v) for v in row[1:])))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out


def pretrain(
    model: SimSiam,
    dataset: PairDataset,
    cfg: OptimConfig,
    monitor: Optional[Monitor] = None,
    out_dir=None,
    seed: int = 0,
    device="cpu",
    resume_from=None,
    num_workers: int = 0,
    state_meta: Optional[Dict[str, str]] = None,
) -> TrainResult:
    """Run SimSiam pretraining.

    One record per epoch; its ``lr`` is the rate at the epoch's first step. The schedule is
    evaluated per step over ``epochs * steps_per_epoch``. With ``out_dir`` set, metrics.csv is
    rewritten after every epoch and a training state is saved every ``save_every`` epochs and at
    the end.
    """
    cfg.validate()
    if len(dataset) < 2:
        raise ValueError("pretraining needs at least 2 images")
    model.to(device)
    opt = build_optimizer(model, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    start_epoch, records, saved = 0, [], []
    if resume_from is not None:
        start_epoch, records, meta = load_state(resume_from, model, opt)
        if json.loads(meta["optim"]) != json.loads(json.dumps(asdict(cfg), sort_keys=True)):
            raise CheckpointError(f"{resume_from}: optimizer config differs from the resumed run")
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)

    steps_per_epoch = len(_batches(len(dataset), cfg.batch_size, seed, 0))
    total_steps = cfg.epochs * steps_per_epoch
    use_cuda_amp = cfg.mixed_precision and torch.device(device).type == "cuda"
    scaler = torch.cuda.amp.GradScaler() if use_cuda_amp else None

    def autocast():
        if not cfg.mixed_precision:
            return contextlib.nullcontext()
        dev = torch.device(device).type
        return torch.autocast(dev, dtype=torch.float16 if dev == "cuda" else torch.bfloat16)

    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        dataset.set_epoch(epoch)
        batches = _batches(len(dataset), cfg.batch_size, seed, epoch)
        loader = DataLoader(dataset, batch_sampler=batches, num_workers=num_workers)
        losses = []
        for i, (x1, x2) in enumerate(loader):
            step = epoch * steps_per_epoch + i
            lr = lr_at(step / total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            x1, x2 = x1.to(device), x2.to(device)
            with autocast():
                z1, p1 = model(x1)
                z2, p2 = model(x2)
                loss = simsiam_loss(p1.float(), p2.float(), z1.float(), z2.float())
            if not torch.isfinite(loss):
                path = None
                if ckpt_dir is not None:
                    path = save_state(ckpt_dir / "abort_state.ckpt", model, opt, epoch, records, cfg, seed,
                                      {"abort": f"non-finite loss at epoch {epoch + 1} step {i}", **(state_meta or {})})
                raise TrainingAborted(f"non-finite loss {loss.item()} at epoch {epoch + 1} step {i}", path)
            opt.zero_grad(set_to_none=True)
            if scaler is not None:
                scaler.scale(loss).backward()
                scaler.step(opt)
                scaler.update()
            else:
                loss.backward()
                opt.step()
            losses.append(loss.item())

        knn, cstd = run_monitor(model, monitor, device)
        rec = TrainRecord(epoch + 1, float(np.mean(losses)), lr_at(epoch / cfg.epochs, cfg), knn, cstd)
        records.append(rec)
        log.info("epoch %d/%d loss %.4f lr %.5f knn %.4f collapse %.5f",
                 rec.epoch, cfg.epochs, rec.loss, rec.lr, rec.knn_balanced_acc, rec.collapse_std)
        if out_dir is not None:
            write_metrics(out_dir / "metrics.csv", records)
            if (epoch + 1) % cfg.save_every == 0 or epoch + 1 == cfg.epochs:
                saved.append(save_state(ckpt_dir / f"state_{epoch + 1:04d}.ckpt", model, opt, epoch + 1,
                                        records, cfg, seed, state_meta))
    return TrainResult(model, records, saved)
