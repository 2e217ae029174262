"""Per-attribute Adam with batched higher-band SH updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet, OpacityMode, normalize_quaternions, sigmoid

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15

SH_REDUCTIONS = ("mean", "sum", "last")


def exponential_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if max_steps <= 0:
        return lr_final
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp((1 - t) * math.log(lr_init) + t * math.log(lr_final))


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 0.025
    sh_dc: float = 2.5e-3
    sh_rest: float = 1e-3


@dataclass
class AdamGroup:
    lr: float
    m: np.ndarray
    v: np.ndarray
    steps: int = 0

    def update(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.steps += 1
        self.m = BETA1 * self.m + (1 - BETA1) * grad
        self.v = BETA2 * self.v + (1 - BETA2) * grad * grad
        m_hat = self.m / (1 - BETA1 ** self.steps)
        v_hat = self.v / (1 - BETA2 ** self.steps)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + EPS)


GROUPS = {
    "positions": "position_init",
    "rotations": "rotation",
    "log_scales": "scale",
    "raw_opacities": "opacity",
    "sh_dc": "sh_dc",
    "sh_rest": "sh_rest",
}


@dataclass
class AdamState:
    """Adam moments for every attribute group of a ``GaussianSet``.

    ``sh_rest`` gradients are summed into an accumulator and applied once
    every ``sh_batch_interval`` iterations (``reduction`` picks mean, sum or
    latest gradient). ``sh_batch_interval <= 1`` updates every iteration.
    """

    groups: dict
    lrs: LearningRates
    scene_extent: float = 1.0
    total_iterations: int = 30000
    sh_batch_interval: int = 16
    reduction: str = "mean"
    sh_accum: np.ndarray = None
    sh_accum_count: int = 0
    sh_last: np.ndarray = None
    history: dict = field(default_factory=dict)

    @classmethod
    def create(cls, gaussians: GaussianSet, lrs: LearningRates | None = None, scene_extent: float = 1.0,
               total_iterations: int = 30000, sh_batch_interval: int = 16,
               reduction: str = "mean") -> "AdamState":
        if reduction not in SH_REDUCTIONS:
            raise ValueError(f"unknown SH reduction {reduction!r}")
        lrs = lrs or LearningRates()
        groups = {}
        for name, lr_attr in GROUPS.items():
            shape = getattr(gaussians, name).shape
            groups[name] = AdamGroup(getattr(lrs, lr_attr), np.zeros(shape), np.zeros(shape))
        groups["positions"].lr = lrs.position_init * scene_extent
        return cls(groups, lrs, scene_extent, total_iterations, sh_batch_interval, reduction,
                   np.zeros(gaussians.sh_rest.shape), 0, np.zeros(gaussians.sh_rest.shape))

    def position_lr(self, iteration: int) -> float:
        return exponential_lr(iteration, self.lrs.position_init * self.scene_extent,
                              self.lrs.position_final * self.scene_extent, self.total_iterations)

    @property
    def batched(self) -> bool:
        return self.sh_batch_interval > 1

    def step(self, gaussians: GaussianSet, grads, iteration: int) -> GaussianSet:
        """Apply one optimizer iteration in place and return ``gaussians``."""
        self.groups["positions"].lr = self.position_lr(iteration)
        for name in GROUPS:
            group = self.groups[name]
            grad = getattr(grads, name)
            if name == "sh_rest" and self.batched:
                self.sh_accum += grad
                self.sh_last = grad
                self.sh_accum_count += 1
                if iteration % self.sh_batch_interval != 0:
                    continue
                if self.reduction == "mean":
                    grad = self.sh_accum / self.sh_accum_count
                elif self.reduction == "sum":
                    grad = self.sh_accum
                else:
                    grad = self.sh_last
                self.sh_accum = np.zeros_like(self.sh_accum)
                self.sh_accum_count = 0
            setattr(gaussians, name, group.update(getattr(gaussians, name), grad))
        gaussians.rotations = normalize_quaternions(gaussians.rotations)
        return gaussians

    def step_counts(self) -> dict:
        return {name: g.steps for name, g in self.groups.items()}

    def select(self, index) -> None:
        """Keep the moment rows given by ``index`` (after pruning)."""
        for g in self.groups.values():
            g.m = g.m[index]
            g.v = g.v[index]
        self.sh_accum = self.sh_accum[index]
        self.sh_last = self.sh_last[index]

    def append(self, sources) -> None:
        """Add fresh zero-moment rows for new Gaussians.

        ``sources`` indexes the parents; their pending SH gradient sums are
        copied so every row carries a full batch window.
        """
        k = len(sources)
        for g in self.groups.values():
            g.m = np.concatenate([g.m, np.zeros((k,) + g.m.shape[1:])])
            g.v = np.concatenate([g.v, np.zeros((k,) + g.v.shape[1:])])
        self.sh_accum = np.concatenate([self.sh_accum, self.sh_accum[sources]])
        self.sh_last = np.concatenate([self.sh_last, self.sh_last[sources]])

    def reset_group(self, name: str) -> None:
        g = self.groups[name]
        g.m = np.zeros_like(g.m)
        g.v = np.zeros_like(g.v)


def switch_to_high_opacity(gaussians: GaussianSet, iteration: int, switch_iteration: int | None,
                           optimizer: AdamState | None = None, lr_scale: float = 1.0) -> bool:
    """Convert to abs-activated opacities at ``switch_iteration``.

    Raw values are re-encoded as ``sigmoid(raw)`` so every activated opacity
    is unchanged at the switch. The opacity moments are reset and the
    group's learning rate is multiplied by ``lr_scale``: the sigmoid slope is
    at most 1/4, so with ``abs`` the same raw step moves the opacity at least
    four times further. Returns True when the switch happened.
    """
    if switch_iteration is None or iteration != switch_iteration:
        return False
    if gaussians.opacity_mode is OpacityMode.HIGH_OPACITY_ABS:
        return False
    gaussians.raw_opacities = sigmoid(gaussians.raw_opacities)
    gaussians.opacity_mode = OpacityMode.HIGH_OPACITY_ABS
    if optimizer is not None:
        optimizer.reset_group("raw_opacities")
        optimizer.groups["raw_opacities"].lr *= lr_scale
    return True
