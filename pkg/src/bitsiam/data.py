"""Manifests, deterministic splits, image loading and a synthetic dataset generator.

Images are decoded to RGB, resized bilinearly to a square target and scaled
to ``[0, 1]`` floats in ``[3, H, W]`` order; per-channel ``(x - mean) / std``
normalization is applied on request. Dataset-level statistics are computed
over the pretrain split and stored in the manifest sidecar so that every
later stage uses the same frozen values.

Manifest CSV columns: ``path,label,split`` (label = class name). A sidecar
``<name>.meta.json`` carries the ordered class names and the normalization
statistics.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from bitsiam.errors import ConfigError

log = logging.getLogger(__name__)

SPLITS = ("pretrain", "finetune", "val", "test")

HAM10000_CLASSES = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"]
HAM10000_MAJORITY = "nv"
CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
HAM_LIKE_PROFILE = (0.67, 0.11)


@dataclass(frozen=True)
class SplitSpec:
    fractions: Tuple[float, float, float, float] = (0.60, 0.10, 0.10, 0.20)
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))

    @classmethod
    def alternate(cls, seed: int = 0, stratified: bool = False) -> "SplitSpec":
        """20% fine-tune pool with no separate validation split."""
        return cls((0.60, 0.20, 0.0, 0.20), seed, stratified)

    def validate(self) -> "SplitSpec":
        if len(self.fractions) != len(SPLITS):
            raise ConfigError(f"expected {len(SPLITS)} split fractions {SPLITS}, got {len(self.fractions)}")
        if any(f < 0 or not math.isfinite(f) for f in self.fractions):
            raise ConfigError(f"split fractions must be finite and non-negative, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions} (sum {sum(self.fractions)!r})")
        return self

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(SPLITS, self.fractions))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    class_names: List[str]
    root: Optional[Path] = None
    mean: Optional[Tuple[float, float, float]] = None
    std: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        self.class_names = list(self.class_names)
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError(f"duplicate class names: {self.class_names}")
        known = set(self.class_names)
        for e in self.entries:
            if e.label not in known:
                raise ConfigError(f"{e.path}: label {e.label!r} not among class names {self.class_names}")
            if e.split not in SPLITS:
                raise ConfigError(f"{e.path}: unknown split tag {e.split!r}")

    def __len__(self):
        return len(self.entries)

    def label_index(self, label: str) -> int:
        return self.class_names.index(label)

    def labels(self, split: Optional[str] = None) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.class_names)}
        return np.array([index[e.label] for e in self.select(split)], dtype=np.int64)

    def select(self, split: Optional[str] = None) -> List[ManifestEntry]:
        return [e for e in self.entries if split is None or e.split == split]

    def counts(self, split: Optional[str] = None) -> Dict[str, int]:
        out = {c: 0 for c in self.class_names}
        for e in self.select(split):
            out[e.label] += 1
        return out

    def split_sizes(self) -> Dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for e in self.entries:
            out[e.split] += 1
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def _meta_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".meta.json")


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for e in manifest.entries:
            writer.writerow([e.path, e.label, e.split])
    meta = {"class_names": manifest.class_names, "mean": manifest.mean, "std": manifest.std}
    _meta_path(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "split"]:
            raise ConfigError(f"{path}: expected header path,label,split, got {reader.fieldnames}")
        entries = [ManifestEntry(r["path"], r["label"], r["split"]) for r in reader]
    meta_file = _meta_path(path)
    mean = std = None
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        class_names = meta["class_names"]
        mean = tuple(meta["mean"]) if meta.get("mean") else None
        std = tuple(meta["std"]) if meta.get("std") else None
    else:
        class_names = sorted({e.label for e in entries})
    return Manifest(entries, class_names, root=path.parent, mean=mean, std=std)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _floor_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """floor(f * n) for the finetune/val/test splits; pretrain takes the rest."""
    sizes = [0] + [int(math.floor(round(f * n, 9))) for f in fractions[1:]]
    sizes[0] = n - sum(sizes)
    return sizes


def split_indices(n: int, spec: SplitSpec, labels: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Index assignment per split. ``labels`` is required when ``spec.stratified``.

    Unstratified: finetune/val/test get ``floor(f * n)`` and pretrain the
    remainder. Stratified: each class is apportioned separately by largest
    remainder, so every split holds ``floor`` or ``ceil`` of ``f * n_class``.
    """
    spec.validate()
    active = sum(1 for f in spec.fractions if f > 0)
    if n < active:
        raise ConfigError(f"{n} samples cannot fill {active} non-empty splits")
    rng = np.random.default_rng(spec.seed)
    parts: Dict[str, List[np.ndarray]] = {s: [] for s in SPLITS}
    if spec.stratified:
        if labels is None:
            raise ConfigError("stratified splitting needs labels")
        labels = np.asarray(labels)
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            if len(members) < active:
                raise ConfigError(f"class {cls!r} has {len(members)} samples, fewer than {active} splits")
            _assign(members[rng.permutation(len(members))], spec, parts, _largest_remainder_sizes)
    else:
        _assign(rng.permutation(n), spec, parts)
    return {s: np.sort(np.concatenate(parts[s])) if parts[s] else np.array([], dtype=np.int64) for s in SPLITS}


def _largest_remainder_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """Every split gets floor or ceil of ``f * n`` (used per class when stratifying)."""
    raw = [round(f * n, 9) for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def _assign(order: np.ndarray, spec: SplitSpec, parts, sizer=_floor_sizes):
    sizes = sizer(len(order), spec.fractions)
    # order: finetune, val, test first, pretrain last (it absorbs the remainder)
    start = 0
    for split, size in list(zip(SPLITS, sizes))[1:] + [(SPLITS[0], sizes[0])]:
        parts[split].append(order[start: start + size])
        start += size


def build_splits(source, spec: SplitSpec) -> Manifest:
    """Assign split tags deterministically.

    ``source`` is either a dataset size (entries are then named by index with a
    single ``unlabeled`` class) or an existing :class:`Manifest` whose tags are
    replaced.
    """
    if isinstance(source, int):
        manifest = Manifest([ManifestEntry(str(i), "unlabeled", "pretrain") for i in range(source)], ["unlabeled"])
    else:
        manifest = source
    labels = manifest.labels() if spec.stratified else None
    assignment = split_indices(len(manifest), spec, labels)
    tags = [""] * len(manifest)
    for split, idx in assignment.items():
        for i in idx:
            tags[i] = split
    entries = [replace(e, split=t) for e, t in zip(manifest.entries, tags)]
    return Manifest(entries, manifest.class_names, manifest.root, manifest.mean, manifest.std)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def _decode_resized(path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise OSError(f"{path}: cannot decode image ({exc})") from None


def to_tensor(hwc_uint8: np.ndarray, mean=None, std=None) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(hwc_uint8)).permute(2, 0, 1).float().div_(255.0)
    if mean is not None:
        x = normalize(x, mean, std)
    return x


def normalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=x.dtype).reshape(-1, 1, 1)
    s = torch.as_tensor(std, dtype=x.dtype).reshape(-1, 1, 1)
    return (x - m) / s


def load_image(entry, target_size: int, mean=None, std=None, root=None) -> torch.Tensor:
    """Decode ``entry`` (a ManifestEntry or path) to a ``[3, S, S]`` float tensor."""
    path = Path(entry.path if isinstance(entry, ManifestEntry) else entry)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return to_tensor(_decode_resized(path, target_size), mean, std)


@dataclass
class ImageArray:
    """In-memory uint8 images ``[N, H, W, 3]`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    ids: List[str] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.images):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "ImageArray":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageArray(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], self.class_names)

    @property
    def size(self) -> int:
        return int(self.images.shape[1])


def load_split(manifest: Manifest, split: Optional[str], size: int, skip_undecodable: bool = False) -> ImageArray:
    entries = manifest.select(split)
    images, labels, ids = [], [], []
    for e in entries:
        try:
            images.append(_decode_resized(manifest.resolve(e), size))
        except OSError:
            if not skip_undecodable:
                raise
            log.warning("skipping undecodable image %s", e.path)
            continue
        labels.append(manifest.label_index(e.label))
        ids.append(e.path)
    arr = np.stack(images) if images else np.zeros((0, size, size, 3), np.uint8)
    return ImageArray(arr, np.array(labels, dtype=np.int64), ids, manifest.class_names)


def channel_stats(images: ImageArray) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean/std of ``[0, 1]``-scaled pixels (population std)."""
    x = images.images.reshape(-1, 3).astype(np.float64) / 255.0
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return tuple(round(float(v), 6) for v in x.mean(axis=0)), tuple(round(float(v), 6) for v in std)


class LabeledDataset(Dataset):
    """Normalized ``(image, label)`` pairs without augmentation (eval/probe path)."""

    def __init__(self, images: ImageArray, mean=None, std=None):
        self.images = images
        self.mean, self.std = mean, std

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return to_tensor(self.images.images[i], self.mean, self.std), int(self.images.labels[i])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def profile_counts(n: int, classes: int, profile: Optional[Sequence[float]] = None) -> List[int]:
    """Per-class counts; the leading classes take ``profile`` shares, the rest split the remainder."""
    profile = list(profile or [])
    if len(profile) > classes or sum(profile) > 1 + 1e-9:
        raise ConfigError(f"profile {profile} does not fit {classes} classes")
    rest = classes - len(profile)
    leftover = 1.0 - sum(profile)
    shares = profile + ([leftover / rest] * rest if rest else [])
    if not rest and abs(leftover) > 1e-9:
        raise ConfigError(f"profile {profile} must sum to 1 when it covers every class")
    raw = [s * n for s in shares]
    counts = [max(1, int(math.floor(r))) for r in raw]
    # largest remainder, then trim if the minimum-one rule overshot
    order = sorted(range(classes), key=lambda c: raw[c] - math.floor(raw[c]), reverse=True)
    i = 0
    while sum(counts) < n:
        counts[order[i % classes]] += 1
        i += 1
    while sum(counts) > n:
        c = max(range(classes), key=lambda k: counts[k] - raw[k])
        counts[c] -= 1
    return counts


def _class_pattern(cls: int, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented grating plus a class hue and per-image noise/phase jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = math.pi * cls / classes + rng.normal(0, 0.08)
    freq = 2.0 + 1.5 * (cls % 3) + rng.normal(0, 0.15)
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    hue = np.array(
        [0.5 + 0.4 * math.cos(2 * math.pi * cls / classes + k * 2 * math.pi / 3) for k in range(3)]
    )
    img = 0.55 * wave[..., None] * hue + 0.25 * (1 - wave[..., None]) * (1 - hue)
    # class-dependent blob position breaks the symmetry between classes sharing a frequency
    cy, cx = 0.5 + 0.25 * math.sin(cls * 2.1), 0.5 + 0.25 * math.cos(cls * 2.1)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.02)
    img = img + 0.3 * blob[..., None]
    img = img + rng.normal(0, 0.06, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def synth_dataset(
    out_dir,
    n: int,
    classes: int,
    image_size: int = 32,
    seed: int = 0,
    profile: Optional[Sequence[float]] = None,
) -> Manifest:
    """Write ``n`` class-conditional PNGs plus ``manifest.csv`` to ``out_dir``.

    Every entry starts tagged ``pretrain``; run :func:`build_splits` to assign
    real splits.
    """
    if n < classes:
        raise ConfigError(f"n={n} must be at least the number of classes ({classes})")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    counts = profile_counts(n, classes, profile)
    labels = np.repeat(np.arange(classes), counts)
    labels = labels[np.random.default_rng([seed, 1]).permutation(n)]
    class_names = [f"class{c}" for c in range(classes)]
    entries = []
    for i, cls in enumerate(labels):
        rng = np.random.default_rng([seed, 2, i])
        rel = f"images/{i:06d}.png"
        Image.fromarray(_class_pattern(int(cls), classes, image_size, rng)).save(out_dir / rel, format="PNG")
        entries.append(ManifestEntry(rel, class_names[cls], "pretrain"))
    manifest = Manifest(entries, class_names, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def with_norm_stats(manifest: Manifest, size: int) -> Manifest:
    """Attach pretrain-split channel statistics (computed at ``size``) to the manifest."""
    stats_split = "pretrain" if manifest.select("pretrain") else None
    mean, std = channel_stats(load_split(manifest, stats_split, size))
    return replace(manifest, mean=mean, std=std)


# ---------------------------------------------------------------------------
# Public datasets
# ---------------------------------------------------------------------------


def ham10000_manifest(metadata_csv, image_dirs: Sequence) -> Manifest:
    """Manifest from HAM10000_metadata.csv: ``image_id`` -> ``<dir>/<image_id>.jpg``, ``dx`` -> class."""
    image_dirs = [Path(d) for d in image_dirs]
    entries = []
    with open(metadata_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            dx = row["dx"].strip()
            if dx not in HAM10000_CLASSES:
                raise ConfigError(f"unknown HAM10000 diagnosis {dx!r} for {row['image_id']}")
            name = row["image_id"].strip() + ".jpg"
            found = next((d / name for d in image_dirs if (d / name).exists()), None)
            if found is None:
                raise FileNotFoundError(f"{name} not found in {[str(d) for d in image_dirs]}")
            entries.append(ManifestEntry(str(found.resolve()), dx, "pretrain"))
    return Manifest(entries, HAM10000_CLASSES)


CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar_batch(path) -> Tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch.

    Each 3073-byte record is a label byte followed by 1024 red, 1024 green and
    1024 blue bytes, each plane row-major 32x32.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return images, labels


def load_cifar10(root, train: bool = True, limit: Optional[int] = None, seed: int = 0) -> ImageArray:
    """Load ``cifar-10-batches-bin``; ``limit`` draws a class-balanced seeded subset."""
    root = Path(root)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    parts = [read_cifar_batch(root / n) for n in names if (root / n).exists()]
    if not parts:
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    data = ImageArray(images, labels, class_names=CIFAR10_CLASSES)
    if limit is not None and limit < len(data):
        rng = np.random.default_rng(seed)
        per = limit // 10
        idx = np.concatenate([rng.choice(np.flatnonzero(labels == c), per, replace=False) for c in range(10)])
        data = data.subset(np.sort(idx))
    return data
