"""Training configuration and its on-disk JSON form."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .optim import LearningRates

CONFIG_VERSION = 1

SCORE_COMPONENTS = ("grad", "pix", "dist", "sal", "blend", "depth", "opac", "scale")


class ConfigError(ValueError):
    pass


@dataclass
class ScoreWeights:
    grad: float = 50.0
    pix: float = 0.1
    dist: float = 50.0
    sal: float = 10.0
    blend: float = 50.0
    depth: float = 5.0
    opac: float = 100.0
    scale: float = 25.0

    def as_tuple(self):
        return tuple(getattr(self, k) for k in SCORE_COMPONENTS)


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    densify_interval: int = 500
    densify_start: int = 500
    densify_end: int = 15000
    budget: Optional[int] = None
    budget_multiplier: Optional[float] = None
    schedule: str = "vertex"
    sh_batch_interval: int = 16
    sh_batch_reduction: str = "mean"
    sh_degree_interval: int = 1000
    max_sh_degree: int = 3
    high_opacity: bool = True
    high_opacity_switch_iteration: Optional[int] = None
    high_opacity_lr_scale: float = 0.25
    sampled_view_count: int = 10
    score_weights: ScoreWeights = field(default_factory=ScoreWeights)
    lambda1: float = 0.5
    lambda2: float = 0.5
    grad_threshold: float = 2e-4
    radius_threshold_fraction: float = 0.01
    split_radius_mode: str = "screen"
    sample_with_replacement: bool = False
    learning_rates: LearningRates = field(default_factory=LearningRates)
    ssim_weight: float = 0.2
    prune_opacity_epsilon: float = 0.005
    opacity_reset_interval: Optional[int] = None
    initial_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    backward: str = "per-splat"
    tight_culling: bool = True
    seed: int = 0
    log_every: int = 1

    @property
    def switch_iteration(self) -> Optional[int]:
        if not self.high_opacity:
            return None
        if self.high_opacity_switch_iteration is not None:
            return self.high_opacity_switch_iteration
        return self.total_iterations // 2

    @property
    def densify_steps(self) -> int:
        return max(0, (self.densify_end - self.densify_start) // self.densify_interval)

    def densify_step_index(self, iteration: int) -> Optional[int]:
        """Schedule step (1-based) triggered at ``iteration``, if any."""
        offset = iteration - self.densify_start
        if offset <= 0 or iteration > self.densify_end or offset % self.densify_interval:
            return None
        return offset // self.densify_interval

    def resolve_budget(self, initial_count: int) -> int:
        if self.budget is not None:
            budget = int(self.budget)
        elif self.budget_multiplier is not None:
            budget = int(round(self.budget_multiplier * initial_count))
        else:
            budget = initial_count
        if budget < initial_count:
            raise ConfigError(f"budget {budget} is below the initial point count {initial_count}")
        return budget

    def validate(self) -> "TrainConfig":
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be non-negative")
        if self.densify_interval <= 0:
            raise ConfigError("densify_interval must be positive")
        if self.densify_end < self.densify_start:
            raise ConfigError("densify_end precedes densify_start")
        if (self.densify_end - self.densify_start) % self.densify_interval:
            raise ConfigError("densify_interval must divide the densification window")
        if min(self.score_weights.as_tuple()) < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("score weights must be non-negative")
        if self.schedule not in ("vertex", "paper-eq2"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.backward not in ("per-pixel", "per-splat"):
            raise ConfigError(f"unknown backward engine {self.backward!r}")
        if self.split_radius_mode not in ("screen", "world"):
            raise ConfigError(f"unknown split radius mode {self.split_radius_mode!r}")
        if self.sh_batch_reduction not in ("mean", "sum", "last"):
            raise ConfigError(f"unknown SH reduction {self.sh_batch_reduction!r}")
        if self.high_opacity_lr_scale <= 0:
            raise ConfigError("high_opacity_lr_scale must be positive")
        if self.sampled_view_count < 1:
            raise ConfigError("sampled_view_count must be at least 1")
        if not 0 <= self.max_sh_degree <= 3:
            raise ConfigError("max_sh_degree must be within 0..3")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return {"config_version": CONFIG_VERSION, **d}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        version = data.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "score_weights" in data:
            data["score_weights"] = load_score_weights(data["score_weights"])
        if "learning_rates" in data:
            data["learning_rates"] = _build(LearningRates, data["learning_rates"])
        if "background" in data:
            data["background"] = tuple(float(x) for x in data["background"])
        return cls(**data).validate()


def _build(kind, data):
    if isinstance(data, kind):
        return data
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**{k: float(v) for k, v in data.items()})


def load_score_weights(data) -> ScoreWeights:
    """Score weights from a dict or a JSON file; missing keys keep defaults."""
    if isinstance(data, (str, Path)):
        data = json.loads(Path(data).read_text())
    weights = _build(ScoreWeights, data)
    if min(weights.as_tuple()) < 0:
        raise ConfigError("score weights must be non-negative")
    return weights


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return TrainConfig.from_dict(data)
