"""ResNet-V2 feature extractor with swappable normalization, plus SimSiam heads.

Canonical parameter names (the contract shared with :mod:`bitsiam.surgery`)::

    stem.conv.weight
    block{i}.unit{j}.conv{k}.weight          i in 1..4, j from 1, k in 1..3
    block{i}.unit{j}.proj.weight             first unit of every block
    block{i}.unit{j}.norm{k}.gamma / .beta   pre-activation norms
    block{i}.unit{j}.norm{k}.running_mean / .running_var   (BatchNorm only)
    norm.gamma / norm.beta (/ running stats)  final pre-pooling norm

Units are pre-activation bottlenecks in the BiT layout: ``norm1`` precedes
``conv1`` (1x1), ``norm2`` precedes ``conv2`` (3x3, carries the stride) and
``norm3`` precedes ``conv3`` (1x1). The projection shortcut consumes the
output of ``relu(norm1(x))``. The stem has no normalization.

All normalizations use the population (biased) variance.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from bitsiam.errors import ConfigError

ArrayLike = Union[torch.Tensor, np.ndarray]

DEPTH_PRESETS = {
    14: (1, 1, 1, 1),
    26: (2, 2, 2, 2),
    50: (3, 4, 6, 3),
    101: (3, 4, 23, 3),
    152: (3, 8, 36, 3),
}


class NormKind(str, Enum):
    BATCH = "batchnorm"
    GROUP_WS = "groupnorm_ws"


class StemKind(str, Enum):
    STANDARD = "standard"
    CIFAR = "cifar"


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1024)
    return Fraction(value)


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 50
    width_mult: Fraction = Fraction(1)
    stem: StemKind = StemKind.STANDARD
    norm: NormKind = NormKind.BATCH
    groups: int = 32
    ws_eps: float = 1e-10
    norm_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "width_mult", _as_fraction(self.width_mult))
        object.__setattr__(self, "stem", StemKind(self.stem))
        object.__setattr__(self, "norm", NormKind(self.norm))

    def _scaled(self, base: int) -> int:
        value = base * self.width_mult
        if value.denominator != 1 or value < 1:
            raise ConfigError(
                f"width_mult={self.width_mult} gives non-integer channel count {float(value)} for base width {base}"
            )
        return int(value)

    @property
    def units(self) -> Tuple[int, ...]:
        try:
            return DEPTH_PRESETS[self.depth]
        except KeyError:
            raise ConfigError(
                f"unknown depth preset {self.depth}; known: {sorted(DEPTH_PRESETS)}"
            ) from None

    @property
    def stem_width(self) -> int:
        return self._scaled(64)

    def block_widths(self, block: int) -> Tuple[int, int]:
        """(bottleneck width, output width) of block ``block`` (1-based)."""
        return self._scaled(64 * 2 ** (block - 1)), self._scaled(256 * 2 ** (block - 1))

    @property
    def feature_dim(self) -> int:
        return self._scaled(2048)

    def norm_channel_counts(self) -> list:
        counts = []
        in_chs = self.stem_width
        for b, n_units in enumerate(self.units, start=1):
            mid, out = self.block_widths(b)
            for _ in range(n_units):
                counts += [in_chs, mid, mid]
                in_chs = out
        counts.append(in_chs)
        return counts

    def validate(self) -> "BackboneConfig":
        self.units  # noqa: B018 - raises on unknown depth
        if self.width_mult <= 0:
            raise ConfigError(f"width_mult must be positive, got {self.width_mult}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be > 0")
        if self.ws_eps <= 0:
            raise ConfigError("ws_eps must be > 0")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError(f"bn_momentum must lie in (0, 1], got {self.bn_momentum}")
        if self.norm is NormKind.GROUP_WS:
            if self.groups < 1:
                raise ConfigError(f"groups must be a positive integer, got {self.groups}")
            bad = sorted({c for c in self.norm_channel_counts() if c % self.groups})
            if bad:
                raise ConfigError(
                    f"channel counts {bad} are not divisible by groups={self.groups}"
                )
        else:
            self.norm_channel_counts()
        return self

    def with_norm(self, norm) -> "BackboneConfig":
        return replace(self, norm=NormKind(norm))


@dataclass(frozen=True)
class HeadConfig:
    projector_layers: int = 3
    projector_dim: int = 2048
    predictor_hidden: int = 512

    @property
    def predictor_out(self) -> int:
        return self.projector_dim

    def validate(self) -> "HeadConfig":
        if self.projector_layers < 1:
            raise ConfigError("projector_layers must be >= 1")
        if self.projector_dim < 1 or self.predictor_hidden < 1:
            raise ConfigError("head widths must be positive")
        if self.predictor_hidden >= self.projector_dim:
            raise ConfigError(
                f"predictor_hidden ({self.predictor_hidden}) must be smaller than "
                f"projector_dim ({self.projector_dim})"
            )
        return self


# ---------------------------------------------------------------------------
# Functional normalization
# ---------------------------------------------------------------------------


def weight_standardize(kernel: ArrayLike, eps: float = 1e-10, name: str = "kernel", check: bool = True):
    """Standardize every output channel of a conv kernel over its fan-in.

    ``result[c] = (kernel[c] - mean(kernel[c])) / sqrt(var(kernel[c]) + eps)``
    with the population variance. numpy input gives numpy output of the same
    dtype (computed in float64).
    """
    if isinstance(kernel, np.ndarray):
        out = weight_standardize(torch.from_numpy(kernel.astype(np.float64)), eps, name, check)
        return out.numpy().astype(kernel.dtype)
    if kernel.dim() != 4:
        raise ValueError(f"{name}: expected a 4-D kernel [out, in, kh, kw], got shape {tuple(kernel.shape)}")
    if kernel.shape[0] < 1 or kernel[0].numel() < 1:
        raise ValueError(f"{name}: empty kernel of shape {tuple(kernel.shape)}")
    if check and not bool(torch.isfinite(kernel).all()):
        raise ValueError(f"{name}: kernel contains non-finite values")
    var, mean = torch.var_mean(kernel, dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (kernel - mean) / torch.sqrt(var + eps)


def _channel_shape(x: torch.Tensor):
    return (1, -1) + (1,) * (x.dim() - 2)


def group_norm(x: torch.Tensor, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> torch.Tensor:
    if x.dim() < 2:
        raise ValueError(f"group_norm expects [B, C, ...], got shape {tuple(x.shape)}")
    b, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigError(f"channel count {c} is not divisible by groups={groups}")
    flat = x.reshape(b, groups, -1)
    var, mean = torch.var_mean(flat, dim=2, keepdim=True, unbiased=False)
    y = ((flat - mean) / torch.sqrt(var + eps)).reshape(x.shape)
    if gamma is not None:
        y = y * gamma.reshape(_channel_shape(x))
    if beta is not None:
        y = y + beta.reshape(_channel_shape(x))
    return y


def batch_norm(
    x: torch.Tensor,
    gamma,
    beta,
    running_stats: Tuple[torch.Tensor, torch.Tensor],
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Batch normalization over every axis except the channel axis (dim 1).

    Returns ``(y, (running_mean, running_var))``. In training mode the new
    running statistics are ``(1 - momentum) * old + momentum * batch`` where
    ``batch`` is the population mean/variance of the current batch; the
    inputs are never modified in place. In eval mode the running statistics
    are used for normalization and returned unchanged.
    """
    running_mean, running_var = running_stats
    reduce_dims = [0] + list(range(2, x.dim()))
    shape = _channel_shape(x)
    if training:
        count = x.numel() // x.shape[1]
        if count < 2:
            raise ValueError(
                f"batch_norm in training mode needs >= 2 values per channel, got {count} (input shape {tuple(x.shape)})"
            )
        var, mean = torch.var_mean(x, dim=reduce_dims, unbiased=False)
        if eps <= 0 and bool((var == 0).any()):
            raise FloatingPointError("zero-variance channel with eps=0 in batch_norm")
        with torch.no_grad():
            new_mean = (1 - momentum) * running_mean + momentum * mean.detach()
            new_var = (1 - momentum) * running_var + momentum * var.detach()
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    y = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + eps)
    if gamma is not None:
        y = y * gamma.reshape(shape)
    if beta is not None:
        y = y + beta.reshape(shape)
    return y, (new_mean, new_var)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class StdConv2d(nn.Conv2d):
    """Conv2d whose kernel is weight-standardized at every forward pass."""

    def __init__(self, *args, eps: float = 1e-10, **kwargs):
        super().__init__(*args, **kwargs)
        self.eps = eps

    def forward(self, x):
        w = weight_standardize(self.weight, self.eps, check=False)
        return F.conv2d(x, w, self.bias, self.stride, self.padding, self.dilation, self.groups)


class GroupNormLayer(nn.Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"channel count {channels} is not divisible by groups={groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        # fused kernel; numerically equal to group_norm() (tested)
        return F.group_norm(x, self.groups, self.gamma, self.beta, self.eps)

    def extra_repr(self):
        return f"{self.gamma.numel()}, groups={self.groups}, eps={self.eps}"


class BatchNormLayer(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, affine: bool = True):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        if affine:
            self.gamma = nn.Parameter(torch.ones(channels))
            self.beta = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("gamma", None)
            self.register_parameter("beta", None)
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        # Fused kernel for the normalization itself; the running statistics are
        # updated here so they follow the population-variance EMA of batch_norm().
        if not self.training:
            return F.batch_norm(x, self.running_mean, self.running_var, self.gamma, self.beta, False, 0.0, self.eps)
        if x.numel() // x.shape[1] < 2:
            raise ValueError(f"BatchNorm in training mode needs >= 2 values per channel, got input {tuple(x.shape)}")
        y = F.batch_norm(x, None, None, self.gamma, self.beta, True, 0.0, self.eps)
        with torch.no_grad():
            dims = [0] + list(range(2, x.dim()))
            var, mean = torch.var_mean(x.detach(), dim=dims, unbiased=False)
            self.running_mean.mul_(1 - self.momentum).add_(mean, alpha=self.momentum)
            self.running_var.mul_(1 - self.momentum).add_(var, alpha=self.momentum)
        return y

    def extra_repr(self):
        return f"{self.running_mean.numel()}, eps={self.eps}, momentum={self.momentum}"


def _norm(cfg: BackboneConfig, channels: int) -> nn.Module:
    if cfg.norm is NormKind.GROUP_WS:
        return GroupNormLayer(channels, cfg.groups, cfg.norm_eps)
    return BatchNormLayer(channels, cfg.norm_eps, cfg.bn_momentum)


def _conv(cfg: BackboneConfig, in_chs, out_chs, kernel_size, stride=1) -> nn.Conv2d:
    padding = kernel_size // 2
    if cfg.norm is NormKind.GROUP_WS:
        return StdConv2d(in_chs, out_chs, kernel_size, stride=stride, padding=padding, bias=False, eps=cfg.ws_eps)
    return nn.Conv2d(in_chs, out_chs, kernel_size, stride=stride, padding=padding, bias=False)


class PreActBottleneck(nn.Module):
    def __init__(self, cfg: BackboneConfig, in_chs: int, mid_chs: int, out_chs: int, stride: int = 1):
        super().__init__()
        self.norm1 = _norm(cfg, in_chs)
        self.conv1 = _conv(cfg, in_chs, mid_chs, 1)
        self.norm2 = _norm(cfg, mid_chs)
        self.conv2 = _conv(cfg, mid_chs, mid_chs, 3, stride=stride)
        self.norm3 = _norm(cfg, mid_chs)
        self.conv3 = _conv(cfg, mid_chs, out_chs, 1)
        if stride != 1 or in_chs != out_chs:
            self.proj = _conv(cfg, in_chs, out_chs, 1, stride=stride)
        else:
            self.proj = None

    def forward(self, x):
        preact = F.relu(self.norm1(x))
        shortcut = self.proj(preact) if self.proj is not None else x
        out = self.conv1(preact)
        out = self.conv2(F.relu(self.norm2(out)))
        out = self.conv3(F.relu(self.norm3(out)))
        return out + shortcut


class Stem(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.stem is StemKind.CIFAR:
            self.conv = _conv(cfg, 3, cfg.stem_width, 3, stride=1)
            self.pool = None
        else:
            self.conv = _conv(cfg, 3, cfg.stem_width, 7, stride=2)
            # BiT pads with zeros before pooling instead of using pool padding
            self.pool = nn.Sequential(nn.ConstantPad2d(1, 0.0), nn.MaxPool2d(3, stride=2))

    def forward(self, x):
        x = self.conv(x)
        if self.pool is not None:
            x = self.pool(x)
        return x


class ResNetV2(nn.Module):
    """Pre-activation ResNet producing globally pooled features."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = Stem(cfg)
        in_chs = cfg.stem_width
        for b, n_units in enumerate(cfg.units, start=1):
            mid, out = cfg.block_widths(b)
            units = OrderedDict()
            for j in range(1, n_units + 1):
                stride = 2 if (j == 1 and b > 1) else 1
                units[f"unit{j}"] = PreActBottleneck(cfg, in_chs, mid, out, stride)
                in_chs = out
            self.add_module(f"block{b}", nn.Sequential(units))
        self.norm = _norm(cfg, in_chs)
        self.feature_dim = in_chs

    def blocks(self):
        return [getattr(self, f"block{b}") for b in range(1, len(self.cfg.units) + 1)]

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks():
            x = block(x)
        x = F.relu(self.norm(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class Projector(nn.Module):
    """MLP with BatchNorm on every layer and no ReLU after the last one."""

    def __init__(self, in_dim: int, head: HeadConfig):
        super().__init__()
        self.n_layers = head.projector_layers
        dim = in_dim
        for i in range(1, self.n_layers + 1):
            last = i == self.n_layers
            self.add_module(f"fc{i}", nn.Linear(dim, head.projector_dim, bias=False))
            self.add_module(f"norm{i}", BatchNormLayer(head.projector_dim, affine=not last))
            dim = head.projector_dim

    def forward(self, x):
        for i in range(1, self.n_layers + 1):
            x = getattr(self, f"norm{i}")(getattr(self, f"fc{i}")(x))
            if i < self.n_layers:
                x = F.relu(x)
        return x


class Predictor(nn.Module):
    """Bottleneck MLP mapping projections to predictions."""

    def __init__(self, head: HeadConfig):
        super().__init__()
        self.fc1 = nn.Linear(head.projector_dim, head.predictor_hidden, bias=False)
        self.norm1 = BatchNormLayer(head.predictor_hidden)
        self.fc2 = nn.Linear(head.predictor_hidden, head.predictor_out)

    def forward(self, x):
        return self.fc2(F.relu(self.norm1(self.fc1(x))))


class SimSiam(nn.Module):
    def __init__(self, cfg: BackboneConfig, head: HeadConfig):
        super().__init__()
        head.validate()
        self.head_cfg = head
        self.backbone = ResNetV2(cfg)
        self.projector = Projector(self.backbone.feature_dim, head)
        self.predictor = Predictor(head)

    @property
    def cfg(self) -> BackboneConfig:
        return self.backbone.cfg

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        """Return ``(z, p)``: projection and prediction for one view batch."""
        z = self.projector(self.backbone(x))
        return z, self.predictor(z)


def build_model(cfg: BackboneConfig, head: Optional[HeadConfig] = None) -> nn.Module:
    """ResNetV2 backbone alone, or wrapped with SimSiam heads when ``head`` is given."""
    if head is None:
        return ResNetV2(cfg)
    return SimSiam(cfg, head)


def get_backbone(model: nn.Module) -> ResNetV2:
    return model.backbone if isinstance(model, SimSiam) else model


def parameter_inventory(model: nn.Module) -> "OrderedDict[str, Tuple[int, ...]]":
    """Canonical name -> shape for every parameter and buffer."""
    return OrderedDict((k, tuple(v.shape)) for k, v in model.state_dict().items())


def conv_names(model: nn.Module):
    return [f"{n}.weight" for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]


def norm_sites(model: nn.Module):
    """Module names of every normalization layer, in construction order."""
    return [n for n, m in model.named_modules() if isinstance(m, (GroupNormLayer, BatchNormLayer))]


def param_digest(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer; used to assert freezing."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
