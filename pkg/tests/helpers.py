"""Fixture builders shared by several test modules."""

import numpy as np
import torch

from bitsiam.backbone import BackboneConfig, NormKind, build_model
from bitsiam.checkpoint import Checkpoint

TOY_GN = BackboneConfig(depth=14, width_mult="1/16", norm=NormKind.GROUP_WS, groups=4)


def toy_gn_checkpoint(cfg=TOY_GN, seed=0, with_head=True) -> Checkpoint:
    """A GroupNorm+WS backbone with non-trivial norm params and a classifier head."""
    torch.manual_seed(seed)
    model = build_model(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".gamma"):
                p.uniform_(0.5, 1.5)
            elif name.endswith(".beta"):
                p.normal_(0, 0.1)
    ckpt = Checkpoint.from_state_dict(model.state_dict(), {"source": "toy", "norm_kind": "groupnorm_ws"})
    if with_head:
        rng = np.random.default_rng(seed)
        ckpt.tensors["head.fc.weight"] = rng.normal(size=(10, cfg.feature_dim, 1, 1)).astype(np.float32)
        ckpt.tensors["head.fc.bias"] = np.zeros(10, dtype=np.float32)
    return ckpt


_LETTER = {1: "a", 2: "b", 3: "c"}


def bit_name(canonical: str) -> str:
    """Inverse of the shipped BiT name map, for fabricating archives."""
    parts = canonical.split(".")
    if canonical == "stem.conv.weight":
        return "resnet/root_block/standardized_conv2d/kernel"
    if parts[0] == "norm":
        return f"resnet/group_norm/{parts[1]}"
    if parts[0] == "head":
        return "resnet/head/conv2d/kernel" if parts[2] == "weight" else "resnet/head/conv2d/bias"
    block, unit, layer, leaf = parts
    prefix = f"resnet/{block}/unit{int(unit[4:]):02d}"
    if layer == "proj":
        return f"{prefix}/a/proj/standardized_conv2d/kernel"
    letter = _LETTER[int(layer[-1])]
    if layer.startswith("conv"):
        return f"{prefix}/{letter}/standardized_conv2d/kernel"
    return f"{prefix}/{letter}/group_norm/{leaf}"


def write_bit_archive(ckpt: Checkpoint, path):
    """Store a canonical GN checkpoint in the released BiT .npz layout (HWIO kernels)."""
    arrays = {}
    for name, arr in ckpt.tensors.items():
        if arr.ndim == 4:
            arr = arr.transpose(2, 3, 1, 0)
        arrays[bit_name(name)] = arr
    np.savez(path, **arrays)
    return path
