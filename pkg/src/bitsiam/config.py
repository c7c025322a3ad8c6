"""Run configuration: a versioned YAML document with strict, line-precise validation."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from bitsiam.backbone import BackboneConfig, HeadConfig
from bitsiam.data import SplitSpec
from bitsiam.errors import ConfigError
from bitsiam.eval import ProbeConfig
from bitsiam.ssl_train import POLICIES, OptimConfig

SCHEMA_VERSION = 1
INIT_KINDS = ("scratch", "surgery")
DATA_SOURCES = ("manifest", "cifar10")


@dataclass(frozen=True)
class DataConfig:
    source: str = "manifest"
    manifest: Optional[str] = None
    root: Optional[str] = None
    image_size: int = 32
    policy: str = "cifar-32"
    split: Optional[SplitSpec] = None
    skip_undecodable: bool = False
    limit: Optional[int] = None
    eval_limit: Optional[int] = None
    num_workers: int = 0


@dataclass(frozen=True)
class MonitorConfig:
    enabled: bool = True
    k: int = 20
    temperature: float = 0.07
    bank_split: str = "finetune"
    query_split: str = "val"


@dataclass(frozen=True)
class InitConfig:
    kind: str = "scratch"
    checkpoint: Optional[str] = None
    bake_ws: bool = False
    name_map: str = "bit_resnetv2"


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    deterministic: bool = False
    device: str = "cpu"
    output_dir: Optional[str] = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    eval: ProbeConfig = field(default_factory=ProbeConfig)
    init: InitConfig = field(default_factory=InitConfig)


SECTIONS = {
    "backbone": BackboneConfig,
    "head": HeadConfig,
    "optimizer": OptimConfig,
    "data": DataConfig,
    "monitor": MonitorConfig,
    "eval": ProbeConfig,
    "init": InitConfig,
}
# relative paths in these fields are resolved against the config file's directory
PATH_FIELDS = (("data", "manifest"), ("data", "root"), ("init", "checkpoint"))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _key_lines(node, path=(), out=None) -> Dict[tuple, int]:
    """1-based line of every mapping key, by dotted path."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _key_lines(v, p, out)
    return out


class _Locator:
    def __init__(self, source: str, lines: Dict[tuple, int]):
        self.source, self.lines = source, lines

    def error(self, path: tuple, message: str) -> ConfigError:
        for i in range(len(path), 0, -1):
            if path[:i] in self.lines:
                return ConfigError(f"{self.source}:{self.lines[path[:i]]}: {'.'.join(path)}: {message}")
        return ConfigError(f"{self.source}: {'.'.join(path) or '<root>'}: {message}")


def _coerce(value, default, ftype, path, loc: _Locator):
    """Check/convert a YAML scalar against a field's default value and annotation."""
    name = ftype if isinstance(ftype, str) else str(ftype)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise loc.error(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, enum.Enum):
        try:
            return type(default)(value)
        except ValueError:
            choices = [m.value for m in type(default)]
            raise loc.error(path, f"expected one of {choices}, got {value!r}") from None
    if isinstance(default, Fraction):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise loc.error(path, f"expected a number or fraction string, got {value!r}")
        try:
            return Fraction(str(value).strip()) if isinstance(value, str) else value
        except (ValueError, ZeroDivisionError):
            raise loc.error(path, f"not a valid fraction: {value!r}") from None
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise loc.error(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise loc.error(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise loc.error(path, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise loc.error(path, f"expected a string, got {value!r}")
        return value
    # Optional fields (default None)
    if value is None:
        return None
    if "int" in name:
        if isinstance(value, bool) or not isinstance(value, int):
            raise loc.error(path, f"expected an integer or null, got {value!r}")
        return value
    if not isinstance(value, str):
        raise loc.error(path, f"expected a string or null, got {value!r}")
    return value


def _build_section(cls, doc, path, loc: _Locator):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise loc.error(path, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise loc.error(path + (unknown[0],), f"unknown key (allowed: {', '.join(fields)})")
    defaults = cls()
    kwargs = {}
    for key, value in doc.items():
        default = getattr(defaults, key)
        if cls is DataConfig and key == "split":
            kwargs[key] = None if value is None else _build_section(SplitSpec, value, path + (key,), loc)
            continue
        kwargs[key] = _coerce(value, default, fields[key].type, path + (key,), loc)
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ConfigError, ValueError, TypeError) as e:
        raise loc.error(_blame(path, str(e), doc), str(e)) from None
    return obj


def _blame(path, message, doc) -> tuple:
    """Point at the key whose name appears in a validation message, if any."""
    for key in doc:
        if key in message:
            return path + (key,)
    return path


def _resolve_paths(doc: dict, base: Path):
    for section, key in PATH_FIELDS:
        sec = doc.get(section)
        if isinstance(sec, dict) and isinstance(sec.get(key), str):
            p = Path(sec[key]).expanduser()
            sec[key] = str(p if p.is_absolute() else (base / p).resolve())


def parse_config(text: str, source: str = "<config>", base_dir=None, check_paths: bool = True) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from None
    loc = _Locator(source, _key_lines(node) if node is not None else {})
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise loc.error((), "top level must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise loc.error(("schema_version",), f"expected schema_version {SCHEMA_VERSION}, got {version!r}")
    if base_dir is not None:
        _resolve_paths(doc, Path(base_dir))

    top = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - set(top))
    if unknown:
        raise loc.error((unknown[0],), f"unknown key (allowed: {', '.join(top)})")
    defaults = RunConfig()
    kwargs: Dict[str, Any] = {}
    for key, value in doc.items():
        if key in SECTIONS:
            kwargs[key] = _build_section(SECTIONS[key], value, (key,), loc)
        else:
            kwargs[key] = _coerce(value, getattr(defaults, key), top[key].type, (key,), loc)
    cfg = RunConfig(**kwargs)
    validate_run_config(cfg, loc, check_paths)
    return cfg


def validate_run_config(cfg: RunConfig, loc: Optional[_Locator] = None, check_paths: bool = True):
    loc = loc or _Locator("<config>", {})
    d, i, m = cfg.data, cfg.init, cfg.monitor
    if d.source not in DATA_SOURCES:
        raise loc.error(("data", "source"), f"expected one of {list(DATA_SOURCES)}, got {d.source!r}")
    if d.policy not in POLICIES:
        raise loc.error(("data", "policy"), f"expected one of {list(POLICIES)}, got {d.policy!r}")
    if d.image_size < 1:
        raise loc.error(("data", "image_size"), "must be positive")
    if i.kind not in INIT_KINDS:
        raise loc.error(("init", "kind"), f"expected one of {list(INIT_KINDS)}, got {i.kind!r}")
    for split_key in ("bank_split", "query_split"):
        if getattr(m, split_key) not in ("pretrain", "finetune", "val", "test"):
            raise loc.error(("monitor", split_key), f"unknown split {getattr(m, split_key)!r}")
    if i.kind == "surgery" and not i.checkpoint:
        raise loc.error(("init", "checkpoint"), "init.kind=surgery needs a checkpoint path")
    if not check_paths:
        return
    if d.source == "manifest":
        if not d.manifest:
            raise loc.error(("data", "manifest"), "data.source=manifest needs a manifest path")
        if not Path(d.manifest).is_file():
            raise loc.error(("data", "manifest"), f"file not found: {d.manifest}")
    if d.source == "cifar10" and not (d.root and Path(d.root).is_dir()):
        raise loc.error(("data", "root"), f"CIFAR-10 directory not found: {d.root}")
    if i.kind == "surgery" and not Path(i.checkpoint).is_file():
        raise loc.error(("init", "checkpoint"), f"file not found: {i.checkpoint}")


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, str(path), base_dir=path.parent, check_paths=check_paths)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return path


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, out=None, deterministic: Optional[bool] = None) -> RunConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["output_dir"] = str(out)
    if deterministic:
        changes["deterministic"] = True
    return dataclasses.replace(cfg, **changes)
