"""GroupNorm+WS -> BatchNorm checkpoint surgery.

Convolution kernels are carried over (raw, or with weight standardization
baked in); every normalization site is reset to BatchNorm defaults
(gamma=1, beta=0, running_mean=0, running_var=1); GroupNorm parameters and
the source classifier head are dropped.
"""

from __future__ import annotations

import json
import logging
import re
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from bitsiam.backbone import (
    BackboneConfig,
    NormKind,
    StemKind,
    build_model,
    conv_names,
    norm_sites,
    parameter_inventory,
    weight_standardize,
)
from bitsiam.checkpoint import Checkpoint, is_native_checkpoint, load_checkpoint
from bitsiam.errors import CheckpointError, IntegrityError, SurgeryError

log = logging.getLogger(__name__)

BN_DEFAULTS = {"gamma": 1.0, "beta": 0.0, "running_mean": 0.0, "running_var": 1.0}
HEAD_PREFIXES = ("head.",)
WS_TOLERANCE = 1e-6

_TRANSFORMS = {
    "identity": lambda a: a,
    "flatten": lambda a: a.reshape(-1),
    "hwio_to_oihw": lambda a: np.ascontiguousarray(a.transpose(3, 2, 0, 1)) if a.ndim == 4 else a,
}


@dataclass(frozen=True)
class NameRule:
    pattern: str
    target: str
    transform: str = "identity"

    def apply(self, name: str) -> Optional[str]:
        m = re.match(self.pattern, name)
        if m is None:
            return None
        # zero-padded indices ("unit01") become plain integers
        groups = {k: (str(int(v)) if v.isdigit() else v) for k, v in m.groupdict().items()}
        positional = [str(int(v)) if v.isdigit() else v for v in m.groups()]
        try:
            return self.target.format(*positional, **groups)
        except (IndexError, KeyError) as exc:
            raise CheckpointError(f"rule {self.pattern!r} -> {self.target!r}: bad template field {exc}") from None


@dataclass
class NameMap:
    rules: List[NameRule]
    name: str = "custom"
    version: int = 1

    @classmethod
    def from_dict(cls, doc) -> "NameMap":
        rules = [NameRule(r["pattern"], r["target"], r.get("transform", "identity")) for r in doc["rules"]]
        for r in rules:
            if r.transform not in _TRANSFORMS:
                raise CheckpointError(f"name map rule {r.pattern!r}: unknown transform {r.transform!r}")
        return cls(rules, doc.get("name", "custom"), int(doc.get("version", 1)))

    @classmethod
    def load(cls, path) -> "NameMap":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def bit_resnetv2(cls) -> "NameMap":
        text = resources.files("bitsiam").joinpath("namemaps/bit_resnetv2.json").read_text()
        return cls.from_dict(json.loads(text))

    @classmethod
    def identity(cls) -> "NameMap":
        return cls([NameRule(r"^(.*)$", "{0}")], "identity")

    def map_names(self, names) -> "OrderedDict[str, Tuple[str, str]]":
        """source name -> (canonical name, transform); raises listing every offender."""
        mapped = OrderedDict()
        unmatched, ambiguous = [], []
        for name in names:
            hits = [(r, r.apply(name)) for r in self.rules]
            hits = [(r, t) for r, t in hits if t is not None]
            if not hits:
                unmatched.append(name)
            elif len(hits) > 1:
                ambiguous.append(f"{name} -> {[t for _, t in hits]}")
            else:
                mapped[name] = (hits[0][1], hits[0][0].transform)
        problems = []
        if unmatched:
            problems.append(f"unmatched source tensors: {unmatched}")
        if ambiguous:
            problems.append(f"ambiguous source tensors: {ambiguous}")
        targets = {}
        for src, (dst, _) in mapped.items():
            targets.setdefault(dst, []).append(src)
        collisions = {d: s for d, s in targets.items() if len(s) > 1}
        if collisions:
            problems.append(f"non-injective mapping: {collisions}")
        if problems:
            raise CheckpointError(f"name map {self.name!r} v{self.version}: " + "; ".join(problems))
        return mapped


def load_archive(path, name_map: Optional[NameMap] = None) -> Checkpoint:
    """Read a zip-of-arrays archive (``.npz``) or a native checkpoint into canonical names."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such file")
    if is_native_checkpoint(path):
        src = load_checkpoint(path)
        raw, meta = src.tensors, dict(src.meta)
    else:
        try:
            with np.load(path, allow_pickle=False) as archive:
                raw = OrderedDict((k, archive[k]) for k in archive.files)
        except (zipfile.BadZipFile, EOFError, OSError, ValueError) as exc:
            raise IntegrityError(f"{path}: unreadable archive ({exc})") from None
        meta = {}
    name_map = name_map or NameMap.identity()
    mapping = name_map.map_names(raw.keys())
    tensors = OrderedDict()
    for src_name, (dst_name, transform) in mapping.items():
        tensors[dst_name] = _TRANSFORMS[transform](np.asarray(raw[src_name]))
    meta.setdefault("source", path.name)
    meta["name_map"] = f"{name_map.name}@v{name_map.version}"
    if name_map.name.startswith("bit-"):
        meta.setdefault("norm_kind", NormKind.GROUP_WS.value)
    return Checkpoint(tensors, meta)


def _target_inventory(cfg: BackboneConfig):
    bn_cfg = cfg.with_norm(NormKind.BATCH)
    with torch.device("meta"):
        model = build_model(bn_cfg)
    return parameter_inventory(model), set(conv_names(model)), norm_sites(model)


def _is_head(name: str) -> bool:
    return name.startswith(HEAD_PREFIXES)


def _stem_dropped(src: Checkpoint, cfg: BackboneConfig, inventory) -> bool:
    name = "stem.conv.weight"
    return (
        cfg.stem is StemKind.CIFAR
        and name in src
        and tuple(src[name].shape) != inventory[name]
    )


def convert_gn_to_bn(src: Checkpoint, cfg: BackboneConfig, bake_ws: bool = False) -> Checkpoint:
    """Rewrite a GroupNorm+WS backbone checkpoint into a BatchNorm one at default init.

    With a CIFAR stem the source 7x7 stem kernel cannot be reused; it is left
    out (the model keeps its fresh 3x3 stem) and ``meta['stem']`` says so.
    """
    if src.meta.get("norm_kind") == NormKind.BATCH.value or "surgery" in src.meta:
        raise SurgeryError(
            f"checkpoint from {src.meta.get('source', '?')} is already BatchNorm "
            f"(surgery={src.meta.get('surgery', 'none')}); refusing to convert twice"
        )
    bn_stats = [n for n in src.names() if n.endswith((".running_mean", ".running_var"))]
    if bn_stats:
        raise SurgeryError(f"source carries BatchNorm running statistics, not a GroupNorm layout: {bn_stats[:5]}")
    inventory, convs, sites = _target_inventory(cfg)
    drop_stem = _stem_dropped(src, cfg, inventory)

    missing = [n for n in inventory if n in convs and n not in src and not (drop_stem and n == "stem.conv.weight")]
    if missing:
        raise SurgeryError(f"source lacks convolution tensors required by the target architecture: {missing}")
    mismatched = [
        f"{n}: source {tuple(src[n].shape)} vs target {inventory[n]}"
        for n in inventory
        if n in convs and n in src and tuple(src[n].shape) != inventory[n] and not (drop_stem and n == "stem.conv.weight")
    ]
    if mismatched:
        raise SurgeryError("shape mismatch: " + "; ".join(mismatched))

    site_params = {f"{s}.{p}" for s in sites for p in ("gamma", "beta")}
    leftovers = [n for n in src.names() if n not in convs and n not in site_params and not _is_head(n)]
    if leftovers:
        raise SurgeryError(f"source tensors not consumed by the target architecture: {leftovers}")

    out = OrderedDict()
    for name, shape in inventory.items():
        if name in convs:
            if drop_stem and name == "stem.conv.weight":
                continue
            kernel = src[name]
            out[name] = weight_standardize(kernel, cfg.ws_eps, name=name) if bake_ws else kernel.copy()
        else:
            site, _, kind = name.rpartition(".")
            out[name] = np.full(shape, BN_DEFAULTS[kind], dtype=np.float32)

    meta = dict(src.meta)
    meta.update(
        {
            "norm_kind": NormKind.BATCH.value,
            "surgery": "gn_to_bn",
            "bake_ws": str(bool(bake_ws)).lower(),
            "source_norm_kind": src.meta.get("norm_kind", NormKind.GROUP_WS.value),
            "arch": f"resnetv2-{cfg.depth}x{cfg.width_mult}",
            "stem": "reinitialized" if drop_stem else "copied",
            "dropped_gn_tensors": str(sum(1 for n in src.names() if n in site_params)),
            "dropped_head_tensors": str(sum(1 for n in src.names() if _is_head(n))),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
    )
    return Checkpoint(out, meta)


@dataclass
class SurgeryReport:
    conv_checked: int = 0
    conv_failures: List[str] = field(default_factory=list)
    bn_failures: List[str] = field(default_factory=list)
    gn_tensors: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)

    @property
    def failures(self) -> List[str]:
        return (
            self.conv_failures
            + self.bn_failures
            + [f"GroupNorm tensor present: {n}" for n in self.gn_tensors]
            + [f"missing tensor: {n}" for n in self.missing]
            + [f"unexpected tensor: {n}" for n in self.unexpected]
        )

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        lines = [f"verify_surgery: {head} ({self.conv_checked} conv tensors checked, {len(self.failures)} failures)"]
        lines += [f"  - {f}" for f in self.failures]
        return "\n".join(lines)

    def to_dict(self):
        return {
            "passed": self.passed,
            "conv_checked": self.conv_checked,
            "failures": self.failures,
        }


def verify_surgery(src: Checkpoint, dst: Checkpoint, cfg: BackboneConfig, bake_ws: Optional[bool] = None) -> SurgeryReport:
    """Audit ``dst`` against ``src``; never raises, failures land in the report."""
    if bake_ws is None:
        bake_ws = dst.meta.get("bake_ws") == "true"
    report = SurgeryReport()
    inventory, convs, sites = _target_inventory(cfg)
    stem_reinit = dst.meta.get("stem") == "reinitialized"

    for name in inventory:
        if name not in dst:
            if not (stem_reinit and name == "stem.conv.weight"):
                report.missing.append(name)
            continue
        if name in convs:
            report.conv_checked += 1
            if name not in src:
                report.conv_failures.append(f"{name}: absent from source")
                continue
            a, b = src[name], dst[name]
            if a.shape != b.shape:
                report.conv_failures.append(f"{name}: shape {b.shape} differs from source {a.shape}")
            elif not bake_ws:
                if a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    report.conv_failures.append(f"{name}: not bit-identical to source")
            else:
                expected = weight_standardize(a.astype(np.float64), cfg.ws_eps)
                err = float(np.max(np.abs(b.astype(np.float64) - expected)))
                if not err <= WS_TOLERANCE:
                    report.conv_failures.append(f"{name}: differs from standardized source kernel (max err {err:.3g})")
        else:
            kind = name.rpartition(".")[2]
            if not np.all(dst[name] == BN_DEFAULTS[kind]):
                report.bn_failures.append(f"non-default BN parameter: {name}")

    for site in sites:
        has_affine = f"{site}.gamma" in dst or f"{site}.beta" in dst
        has_stats = f"{site}.running_mean" in dst and f"{site}.running_var" in dst
        if has_affine and not has_stats:
            report.gn_tensors += [n for n in (f"{site}.gamma", f"{site}.beta") if n in dst]
    for name in dst.names():
        if name not in inventory:
            if "group_norm" in name or name.endswith((".gn.gamma", ".gn.beta")):
                report.gn_tensors.append(name)
            else:
                report.unexpected.append(name)
    return report


def load_backbone_weights(model, ckpt: Checkpoint, prefix: str = ""):
    """Load ``ckpt`` into a backbone (or into ``model.backbone`` via ``prefix``).

    Returns ``(missing, unexpected)``. Source classifier-head tensors are
    skipped; a reinitialized stem (CIFAR surgery) is allowed to be missing.
    Anything else missing or unexpected raises.
    """
    target = model.get_submodule(prefix.rstrip(".")) if prefix else model
    state = target.state_dict()
    incoming = OrderedDict()
    unexpected = []
    for name, arr in ckpt.tensors.items():
        if _is_head(name):
            continue
        if name not in state:
            unexpected.append(name)
            continue
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {tuple(state[name].shape)}")
        incoming[name] = torch.from_numpy(np.ascontiguousarray(arr).copy()).to(state[name].dtype)
    missing = [n for n in state if n not in incoming]
    allowed_missing = {"stem.conv.weight"} if ckpt.meta.get("stem") == "reinitialized" else set()
    bad_missing = [n for n in missing if n not in allowed_missing]
    if unexpected or bad_missing:
        raise CheckpointError(f"checkpoint does not fit model: missing={bad_missing} unexpected={unexpected}")
    target.load_state_dict(incoming, strict=False)
    return missing, unexpected
