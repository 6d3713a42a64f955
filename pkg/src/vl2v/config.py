"""Experiment configuration: a tree of dataclasses read from YAML.

Parsing is strict. Unknown keys and values of the wrong type raise
:class:`ConfigError` carrying the dotted path of the offending field, so a
typo in a loss weight cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import GeneratorParams
from .errors import ConfigError
from .training import ABLATION_IDS, TrainConfig, method_names


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 5
    num_domains: int = 4
    per_domain_count: int = 100
    alpha: float = 0.8
    sigma: float = 0.2
    dim: int = 16
    input_dim: int = 32
    seed: int | None = None  # None: follow the run seed
    style_share: float = 0.8
    noise_scale: float = 1.5
    input_shift: float = 0.2
    obs_noise: float = 0.01
    min_angle_deg: float = 60.0
    max_tries: int = 1000

    def params(self, run_seed: int) -> GeneratorParams:
        values = dataclasses.asdict(self)
        values["seed"] = run_seed if self.seed is None else self.seed
        return GeneratorParams(**values)


@dataclass(frozen=True)
class DatasetConfig:
    path: str | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "synthetic"  # synthetic | file
    path: str | None = None


@dataclass(frozen=True)
class ProbeConfig:
    k: int = 10
    modes: tuple[str, ...] = ("E1", "E2", "E3", "E4", "E5", "E6")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    method: str = "adip"
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablations: tuple[str, ...] = ABLATION_IDS
    seeds: tuple[int, ...] = (0,)
    output: str = "runs"

    def validate(self) -> None:
        if self.method not in method_names():
            raise ConfigError(f"unknown method {self.method!r}", "method")
        if self.teacher.kind not in ("synthetic", "file"):
            raise ConfigError("must be 'synthetic' or 'file'", "teacher.kind")
        if self.teacher.kind == "file" and not self.teacher.path:
            raise ConfigError("a file teacher needs a path", "teacher.path")
        if not self.seeds:
            raise ConfigError("at least one seed required", "seeds")
        for a in self.ablations:
            if a not in ABLATION_IDS:
                raise ConfigError(f"unknown ablation {a!r}", "ablations")
        if self.probe.k < 1:
            raise ConfigError("must be positive", "probe.k")
        try:
            self.train.validate()
        except ConfigError as exc:
            raise ConfigError(exc.message, f"train.{exc.path}" if exc.path else "train") from None
        try:
            self.dataset.generator.params(0).validate()
        except ConfigError as exc:
            raise ConfigError(exc.message, f"dataset.generator.{exc.path}") from None


# ---------------------------------------------------------------------------
# dataclass <-> plain tree


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if origin is frozenset:
        if not isinstance(value, (list, tuple, set, frozenset)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return frozenset(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def _build(cls, tree, path: str = ""):
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"expected a mapping, got {type(tree).__name__}", path or "<root>")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in tree:
        if key not in known:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown key (expected one of {', '.join(sorted(known))})", where)
    values = {}
    for f in fields(cls):
        if f.name in tree:
            where = f"{path}.{f.name}" if path else f.name
            values[f.name] = _coerce(tree[f.name], hints[f.name], where)
    return cls(**values)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, frozenset):
        return sorted(value)
    return value


def config_from_dict(tree: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, tree)
    cfg.validate()
    return cfg


def config_to_dict(cfg) -> dict:
    return _plain(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}", str(path)) from None
    return config_from_dict(tree or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
