"""Run configuration files (YAML) with strict, line-anchored validation."""

from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import yaml

from .losses import LossConfig
from .renderer import SamplingConfig
from .scenes import SCENES
from .trainer import ANNEAL_KINDS, CameraConfig, FieldConfig, OracleConfig, TrainConfig

OUTPUT_ROOT_ENV = "SDSFIELD_OUTPUT_ROOT"

# top-level sections backed by TrainConfig members; "train" holds its scalar fields
TRAIN_SECTIONS = {"loss": LossConfig, "oracle": OracleConfig, "sampling": SamplingConfig,
                  "camera": CameraConfig, "field": FieldConfig}
_TRAIN_SCALARS = [f.name for f in dataclasses.fields(TrainConfig) if f.name not in TRAIN_SECTIONS]


class ConfigError(ValueError):
    """Configuration problem; ``str()`` carries ``file:line:col`` when known."""

    def __init__(self, message: str, source: str | None = None, mark=None):
        where = source or "<config>"
        if mark is not None:
            where += f":{mark.line + 1}:{mark.column + 1}"
        super().__init__(f"{where}: {message}")


@dataclass
class TargetConfig:
    scene: str | None = "sphere"  # procedural reference field rendered as the target
    resolution: tuple = (32, 32, 32)
    image: str | None = None  # fixed target image; pairs with camera.fixed_pose


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    checkpoint_every: int = 0
    preview_views: int = 4


@dataclass
class RunConfig:
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    target: TargetConfig = dc_field(default_factory=TargetConfig)
    output: OutputConfig = dc_field(default_factory=OutputConfig)
    source: str | None = None  # file the config was read from

    @property
    def base_dir(self) -> Path:
        return Path(self.source).resolve().parent if self.source else Path.cwd()

    def target_image_path(self) -> Path | None:
        if self.target.image is None:
            return None
        p = Path(self.target.image)
        return p if p.is_absolute() else self.base_dir / p

    def output_dir(self) -> Path:
        p = Path(self.output.dir)
        if p.is_absolute():
            return p
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return (Path(root) if root else Path.cwd()) / p


# --- parsing ------------------------------------------------------------------

def _type_hints(cls):
    return typing.get_type_hints(cls)


def _coerce(value, hint, default, where: str):
    """Check ``value`` against the field's annotation / default; returns the stored value."""
    optional = hint is not None and type(None) in typing.get_args(hint)
    if value is None:
        if optional or default is None:
            return None
        raise TypeError(f"{where} may not be null")
    if isinstance(default, bool) or hint is bool:
        if not isinstance(value, bool):
            raise TypeError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) or hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float) or hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple) or typing.get_origin(hint) is tuple or tuple in typing.get_args(hint):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise TypeError(f"{where} must be a list of numbers, got {value!r}")
        if not where.endswith(".kernel") and len(value) != 3:
            raise TypeError(f"{where} must have 3 entries, got {len(value)}")
        ints = where.endswith("resolution")
        return tuple(int(v) if ints else float(v) for v in value)
    if isinstance(value, (dict, list)):
        raise TypeError(f"{where} must be a scalar, got {type(value).__name__}")
    return str(value)


def _mapping_items(node: yaml.MappingNode):
    return [(k.value, k, v) for k, v in node.value]


def _fill(obj, node, prefix: str, source: str | None, allowed: list[str] | None = None):
    """Set dataclass fields of ``obj`` from a YAML mapping node, rejecting unknown keys."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"section '{prefix}' must be a mapping", source, node.start_mark)
    hints = _type_hints(type(obj))
    names = allowed if allowed is not None else [f.name for f in dataclasses.fields(obj)]
    seen = set()
    for key, knode, vnode in _mapping_items(node):
        where = f"{prefix}.{key}" if prefix else key
        if key in seen:
            raise ConfigError(f"duplicate key '{where}'", source, knode.start_mark)
        seen.add(key)
        if key not in names:
            raise ConfigError(f"unknown key '{where}' (expected one of: {', '.join(names)})", source, knode.start_mark)
        value = yaml.safe_load(yaml.serialize(vnode))
        try:
            setattr(obj, key, _coerce(value, hints.get(key), getattr(obj, key), where))
        except TypeError as exc:
            raise ConfigError(str(exc), source, vnode.start_mark) from None


def parse_config(text: str, source: str | None = None) -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source, mark) from None
    run = RunConfig(source=source)
    if root is None:
        return _validate(run, {}, source)
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", source, root.start_mark)
    sections = ["train", "target", "output", *TRAIN_SECTIONS]
    marks = {}
    for key, knode, vnode in _mapping_items(root):
        if key not in sections:
            raise ConfigError(f"unknown key '{key}' (expected one of: {', '.join(sections)})", source, knode.start_mark)
        if key in marks:
            raise ConfigError(f"duplicate key '{key}'", source, knode.start_mark)
        marks[key] = vnode
        if key == "train":
            _fill(run.train, vnode, key, source, _TRAIN_SCALARS)
        elif key in TRAIN_SECTIONS:
            _fill(getattr(run.train, key), vnode, key, source)
        else:
            _fill(getattr(run, key), vnode, key, source)
    return _validate(run, marks, source)


def _key_mark(marks: dict, section: str, key: str | None = None):
    node = marks.get(section)
    if node is None:
        return None
    if key is not None and isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            if k.value == key:
                return v.start_mark
    return node.start_mark


def _validate(run: RunConfig, marks: dict, source: str | None) -> RunConfig:
    """Semantic checks that need more than one field's type."""
    def fail(section, key, msg):
        raise ConfigError(f"{section}.{key}: {msg}", source, _key_mark(marks, section, key))

    t = run.train
    if t.total_iter < 0:
        fail("train", "total_iter", "must be >= 0")
    if t.image_size < 1 or t.image_size % t.codec_factor:
        fail("train", "image_size", f"must be positive and divisible by codec_factor={t.codec_factor}")
    if t.anneal not in ANNEAL_KINDS:
        fail("train", "anneal", f"must be one of {', '.join(ANNEAL_KINDS)}")
    for key in ("lr_field", "lr_background"):
        if getattr(t, key) <= 0:
            fail("train", key, "must be positive")
    if t.oracle.variant not in ("target", "gaussian"):
        fail("oracle", "variant", "must be 'target' or 'gaussian'")
    if not 0.0 < t.oracle.t_min < t.oracle.t_max < 1.0:
        fail("oracle", "t_min", "need 0 < t_min < t_max < 1")
    if t.oracle.weighting not in ("sigma2", "uniform"):
        fail("oracle", "weighting", "must be 'sigma2' or 'uniform'")
    if t.oracle.denoise_steps < 1:
        fail("oracle", "denoise_steps", "must be >= 1")
    if t.sampling.n_coarse < 2:
        fail("sampling", "n_coarse", "must be >= 2")
    if t.sampling.n_fine < 0:
        fail("sampling", "n_fine", "must be >= 0")
    k = t.sampling.kernel
    if len(k) % 2 == 0 or any(v < 0 for v in k) or sum(k) <= 0:
        fail("sampling", "kernel", "needs an odd number of non-negative taps with positive sum")
    if any(r < 2 for r in t.field.resolution):
        fail("field", "resolution", "every side must be >= 2")
    if t.field.init not in ("blob", "empty"):
        fail("field", "init", "must be 'blob' or 'empty'")
    if run.target.image is None and run.target.scene is None and t.oracle.variant == "target":
        fail("target", "scene", "target oracle needs target.scene or target.image")
    if run.target.image is not None:
        path = run.target_image_path()
        if not path.is_file():
            fail("target", "image", f"file not found: {path}")
        if t.camera.fixed_pose is None:
            fail("camera", "fixed_pose", "a fixed target image needs camera.fixed_pose")
    elif run.target.scene is not None and run.target.scene not in SCENES:
        fail("target", "scene", f"must be one of {', '.join(SCENES)}")
    if run.output.checkpoint_every < 0:
        fail("output", "checkpoint_every", "must be >= 0")
    return run


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


# --- serialization --------------------------------------------------------

def _plain(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_dict(run: RunConfig) -> dict:
    t = run.train
    d = {"train": {k: getattr(t, k) for k in _TRAIN_SCALARS}}
    for name in TRAIN_SECTIONS:
        d[name] = _plain(getattr(t, name))
    d["target"] = _plain(run.target)
    d["output"] = _plain(run.output)
    return d


def dump_config(run: RunConfig) -> str:
    return yaml.safe_dump(config_dict(run), sort_keys=False, default_flow_style=None)


def with_overrides(run: RunConfig, **train_changes) -> RunConfig:
    out = copy.deepcopy(run)
    for k, v in train_changes.items():
        setattr(out.train, k, v)
    return out
