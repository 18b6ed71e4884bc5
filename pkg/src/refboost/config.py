"""Experiment configuration: one YAML file reproduces one experiment.

The file is a nested key-value document mirroring the dataclasses below;
load -> save -> load is the identity, which is what makes a config file a
complete record of a run.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .plant import MismatchSpec, RobotParams
from .train import LossSpec, TrainConfig

__all__ = [
    "EvalConfig",
    "RobustnessConfig",
    "SimulateConfig",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class EvalConfig:
    n_test: int = 50
    horizon: int = 200
    seed: int = 1
    sigma: float = 0.5
    use_benchmark_targets: bool = False


@dataclass
class RobustnessConfig:
    margin: float = 0.5
    trials: int = 50
    horizon: int = 400
    gain_trials: int = 10
    seed: int = 0
    betas: list[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])


@dataclass
class SimulateConfig:
    horizon: int = 200
    n_rollouts: int = 1
    sigma: float = 0.5
    use_benchmark_targets: bool = True


@dataclass
class ExperimentConfig:
    layout: str = "corridor"
    seed: int = 0
    out_dir: str = "runs/out"
    robot: RobotParams = field(default_factory=RobotParams)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    mismatch: MismatchSpec = field(default_factory=MismatchSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def to_dict(self) -> dict:
        data = asdict(self)
        ft = data["train"]["fixed_targets"]
        if ft is not None:
            data["train"]["fixed_targets"] = np.asarray(ft).tolist()
        return data

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        def build(cls, sub):
            if sub is None:
                return cls()
            if not isinstance(sub, dict):
                raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(sub).__name__}")
            known = {f.name for f in fields(cls)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
            try:
                return cls(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {cls.__name__}: {exc}") from exc

        data = dict(data or {})
        sections = {
            "robot": RobotParams,
            "loss": LossSpec,
            "train": TrainConfig,
            "mismatch": MismatchSpec,
            "eval": EvalConfig,
            "robustness": RobustnessConfig,
            "simulate": SimulateConfig,
        }
        kwargs = {}
        for key in ("layout", "seed", "out_dir"):
            if key in data:
                kwargs[key] = data.pop(key)
        for key, cls in sections.items():
            sub = data.pop(key, None)
            if key == "train" and sub and sub.get("fixed_targets") is not None:
                sub = dict(sub)
                sub["fixed_targets"] = np.asarray(sub["fixed_targets"], dtype=np.float64)
            kwargs[key] = build(cls, sub)
        if data:
            raise ConfigError(f"unknown top-level keys: {sorted(data)}")
        return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
