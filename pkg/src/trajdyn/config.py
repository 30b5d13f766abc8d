"""Experiment configuration: YAML in, typed dataclasses out, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    id: str = "cartpole"
    params: dict = field(default_factory=dict)
    max_steps: int = 500


@dataclass
class ControllerConfig:
    recipe: str = "stable"
    Q: list = field(default_factory=lambda: [0.5, 0.05, 1.0, 0.05])
    R: list = field(default_factory=lambda: [1.0])


@dataclass
class DataConfig:
    n_train: int = 100
    train_length: int = 200
    n_val: int = 100
    val_length: int = 300


@dataclass
class ModelConfig:
    """Per-kind overrides; ``null`` means the family default."""

    hidden: list = field(default_factory=lambda: [250, 250])
    activation: str = "silu"
    lr: Optional[float] = None
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    train_fraction: Optional[float] = None
    cap: int = 100_000
    ensemble_size: int = 5
    lv_bounds: list = field(default_factory=lambda: [-10.0, 4.0])
    dtype: str = "float32"
    early_stopping: Optional[bool] = None


@dataclass
class EvalConfig:
    kinds: list = field(default_factory=lambda: ["D", "T"])
    epochs: list = field(default_factory=lambda: [1, 3, 5, 8, 12, 16])
    uncertainty_kinds: list = field(default_factory=lambda: ["P", "TP"])
    n_reward_eval: int = 100
    reward_horizon: int = 200
    direct_nn_epochs: int = 300


@dataclass
class SampleConfig:
    env: str = "arm"
    kinds: list = field(default_factory=lambda: ["D", "T"])
    lengths: list = field(default_factory=lambda: [5, 25, 50, 100])
    counts: list = field(default_factory=lambda: [1, 5, 10, 20])
    seeds: int = 5
    n_val: int = 100
    val_length: int = 100


@dataclass
class DatatypeConfig:
    n: int = 100
    length: int = 200
    box_low: float = -0.1
    box_high: float = 1.5
    train: list = field(default_factory=lambda: ["stable", "unstable", "periodic"])
    test: list = field(default_factory=lambda: ["stable", "unstable", "periodic"])
    kinds: list = field(default_factory=lambda: ["D", "T"])


@dataclass
class IterateConfig:
    trials: int = 10
    seeds: int = 10
    horizon: int = 200
    box_low: float = -0.1
    box_high: float = 2.0
    max_evals: int = 5000
    threshold: float = 0.9
    oracle_grid: int = 2101


@dataclass
class MpcConfig:
    trials: int = 25
    steps: int = 100
    tau: int = 50
    candidates: int = 500
    force_bound: float = 20.0
    replan_period: Optional[int] = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    env: EnvConfig = field(default_factory=EnvConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    models: dict = field(default_factory=dict)  # kind -> ModelConfig overrides
    eval: EvalConfig = field(default_factory=EvalConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    datatype: DatatypeConfig = field(default_factory=DatatypeConfig)
    iterate: IterateConfig = field(default_factory=IterateConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)

    def model_spec(self, kind: str):
        from .models import ModelSpec

        base = dataclasses.asdict(self.model)
        base.update(self.models.get(kind, {}))
        base["hidden"] = tuple(base["hidden"])
        base["lv_bounds"] = tuple(base["lv_bounds"])
        return ModelSpec(kind=kind, **base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        # the run directory does not change results, so it stays out of the identity
        d = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif name == "models" and cls is ExperimentConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.models: expected a mapping of kind -> overrides")
            model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
            for kind, ov in value.items():
                bad = sorted(set(ov or {}) - model_keys)
                if bad:
                    raise ConfigError(f"{where}.models.{kind}: unknown key(s) {', '.join(bad)}")
            kwargs[name] = {k: dict(v or {}) for k, v in value.items()}
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "config")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
