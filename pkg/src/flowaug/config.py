"""Experiment configuration: nested dataclasses loaded from YAML, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import PerturbationSpec
from .optim import LrSchedule, OptimizerState

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str = "gaussian_mixture_4"
    classes: typing.Optional[int] = None
    noise: float = 0.35
    n_train: int = 2000
    n_test: int = 2000
    seed: int = 0
    fraction: float = 1.0
    subset_seed: int = 0
    train_images: typing.Optional[str] = None
    train_labels: typing.Optional[str] = None
    test_images: typing.Optional[str] = None
    test_labels: typing.Optional[str] = None


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999

    def build(self) -> OptimizerState:
        return OptimizerState(self.kind, lr=self.lr, weight_decay=self.weight_decay,
                              momentum=self.momentum, beta1=self.beta1, beta2=self.beta2)


@dataclass
class FlowSpec:
    blocks: int = 12
    hidden: int = 64
    clamp: float = 2.0
    double_coupling: bool = True
    actnorm: bool = False
    invlinear: bool = False
    conditional: bool = False
    epochs: int = 50
    batch_size: int = 100
    train_on: str = "full"
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: typing.Optional[LrSchedule] = None
    checkpoint: typing.Optional[str] = None


@dataclass
class ClassifierSpec:
    arch: str = "mlp"
    hidden: typing.List[int] = field(default_factory=lambda: [64, 64])
    channels: typing.List[int] = field(default_factory=lambda: [6, 16])
    fc: typing.List[int] = field(default_factory=lambda: [120, 84])
    batch_size: int = 32
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: typing.Optional[LrSchedule] = None
    grad_check_tol: typing.Optional[float] = None


@dataclass
class PhaseSpec:
    epochs: int
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)


@dataclass
class EvalSpec:
    attacks: typing.List[PerturbationSpec] = field(default_factory=list)
    max_samples: typing.Optional[int] = None
    frechet: bool = True
    frechet_samples: int = 1000
    image_grid: bool = False


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    precision: str = "f64"
    output_dir: str = "runs/experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    flow: typing.Optional[FlowSpec] = None
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    phases: typing.List[PhaseSpec] = field(default_factory=lambda: [PhaseSpec(10)])
    evaluation: EvalSpec = field(default_factory=EvalSpec)

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def needs_flow(self) -> bool:
        return (any(p.perturbation.is_latent for p in self.phases)
                or any(a.is_latent for a in self.evaluation.attacks))


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null not allowed")
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple or tp is tuple:
        return tuple(value)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    cfg = from_dict(ExperimentConfig, data)
    base = Path(path).resolve().parent
    _resolve_paths(cfg, base)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> None:
    ds = cfg.dataset
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        v = getattr(ds, name)
        if v is not None and not Path(v).is_absolute():
            setattr(ds, name, str(base / v))
    if cfg.flow is not None and cfg.flow.checkpoint and not Path(cfg.flow.checkpoint).is_absolute():
        cfg.flow.checkpoint = str(base / cfg.flow.checkpoint)


def validate(cfg: ExperimentConfig, load_flow: str | None = None) -> None:
    """Check the config before any compute; raises ConfigError."""
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} unsupported (expected {SCHEMA_VERSION})")
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {cfg.precision!r}")
    ds = cfg.dataset
    if not 0 < ds.fraction <= 1:
        raise ConfigError(f"dataset.fraction must lie in (0, 1], got {ds.fraction}")
    if ds.name == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            v = getattr(ds, name)
            if v is None:
                raise ConfigError(f"dataset.{name} is required for idx datasets")
            if not Path(v).is_file():
                raise ConfigError(f"dataset.{name}: file not found: {v}")
        if ds.classes is None:
            raise ConfigError("dataset.classes is required for idx datasets")
    if not cfg.phases:
        raise ConfigError("at least one phase is required")
    if cfg.needs_flow() and cfg.flow is None:
        raise ConfigError("latent perturbations need a flow section")
    if cfg.flow is not None:
        if cfg.flow.train_on not in ("full", "subset"):
            raise ConfigError("flow.train_on must be 'full' or 'subset'")
        if cfg.flow.conditional and cfg.flow.train_on == "full" and ds.fraction < 1:
            raise ConfigError("a conditional flow trained on the full set would see labels "
                              "outside the labeled subset; use flow.train_on: subset")
        ckpt = load_flow or cfg.flow.checkpoint
        if ckpt and not Path(ckpt).is_file():
            raise ConfigError(f"flow checkpoint not found: {ckpt}")
    elif load_flow and not Path(load_flow).is_file():
        raise ConfigError(f"flow checkpoint not found: {load_flow}")
    if cfg.classifier.arch not in ("mlp", "lenet"):
        raise ConfigError(f"classifier.arch must be mlp or lenet, got {cfg.classifier.arch!r}")
