"""Run configuration: a strict, sectioned YAML file.

Sections: bundle, estimator, train, eval, quant, attribution, output.
Unknown keys anywhere are rejected so typos fail loudly, and every command
writes the fully resolved configuration next to its outputs so a run never
depends on ambient defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .estimator import EstimatorConfig
from .training import TrainConfig


@dataclass
class BundleSection:
    kind: str = "classification"
    seed: int = 0
    num_classes: int = 4
    feature_channels: int = 16
    levels: int = 2
    train_size: int = 1024
    eval_size: int = 512
    pretrain_epochs: int = 0  # 0 = builder default


@dataclass
class EstimatorSection:
    hidden_width: int = 64
    num_residual_blocks: int = 2
    clamp_bound: float = 10.0
    activation: str = "relu"


@dataclass
class TrainSection:
    lambda_t: float = 50.0
    temperature: float = 4.0
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    grad_clip_norm: float = 1.0
    seed: int = 0


@dataclass
class EvalSection:
    # alpha grid 0..3 in steps of 0.25; sigma grid spans a comparable NRMSE
    # range on the default classification bundle
    alphas: list = field(default_factory=lambda: [round(0.25 * i, 2) for i in range(13)])
    sigmas: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 1.75, 2.75, 4.0, 5.5, 7.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eps: float = 1e-8


@dataclass
class QuantSection:
    # noise budgets where quantization materially degrades the default bundle
    sigma_tgt: list = field(default_factory=lambda: [1.0, 1.6, 2.2, 2.8, 3.4])
    agg: str = "channel_mean"
    floor_rel: float = 1e-3
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class AttributionSection:
    steps: int = 20
    examples: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class OutputSection:
    dir: str = "runs/default"


_SECTIONS = {
    "bundle": BundleSection,
    "estimator": EstimatorSection,
    "train": TrainSection,
    "eval": EvalSection,
    "quant": QuantSection,
    "attribution": AttributionSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    bundle: BundleSection = field(default_factory=BundleSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    quant: QuantSection = field(default_factory=QuantSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            raw = data.get(name, {})
            if raw is None:
                raw = {}
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**raw)
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def resolved(self) -> dict:
        return asdict(self)

    def write_resolved(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.resolved(), fh, sort_keys=True)

    # -- derived objects -----------------------------------------------------

    def estimator_config(self, in_channels: int) -> EstimatorConfig:
        e = self.estimator
        return EstimatorConfig(
            in_channels=in_channels,
            hidden_width=e.hidden_width,
            num_residual_blocks=e.num_residual_blocks,
            clamp_bound=e.clamp_bound,
            activation=e.activation,
        )

    def train_config(self, task: str) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lambda_t=t.lambda_t,
            temperature=t.temperature,
            learning_rate=t.learning_rate,
            batch_size=t.batch_size,
            epochs=t.epochs,
            grad_clip_norm=t.grad_clip_norm,
            task=task,
            seed=t.seed,
        )

    def bundle_kwargs(self) -> dict:
        b = self.bundle
        if b.kind == "classification":
            kwargs = {
                "seed": b.seed,
                "num_classes": b.num_classes,
                "feature_channels": b.feature_channels,
                "train_size": b.train_size,
                "eval_size": b.eval_size,
            }
        else:
            kwargs = {
                "seed": b.seed,
                "levels": b.levels,
                "feature_channels": b.feature_channels,
                "train_size": b.train_size,
                "eval_size": b.eval_size,
            }
        if b.pretrain_epochs > 0:
            kwargs["pretrain_epochs"] = b.pretrain_epochs
        return kwargs
