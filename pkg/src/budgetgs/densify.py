"""Budgeted, score-guided densification.

Growth follows a precomputed target curve that starts at the initial point
count and reaches the budget at the last densification step. At each step
Gaussians are scored over a few sampled views, the deficit to the current
target is drawn by weighted sampling without replacement, and every drawn
Gaussian is either split or cloned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backward import DensificationStats
from .config import SCORE_COMPONENTS, ScoreWeights, TrainConfig
from .core import GaussianSet, quaternion_to_rotation
from .loss import l1_loss, saliency
from .projection import project
from .raster import render, render_with_stats

SPLIT_SCALE_DIVISOR = 1.6
MEDIAN_CLAMP = 10.0


@dataclass
class GrowthSchedule:
    initial: int
    budget: int
    steps: int
    targets: np.ndarray

    def target(self, step_index: int) -> int:
        return int(self.targets[step_index])

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.targets)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    # largest-remainder rounding; keeps a non-increasing sequence non-increasing
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(np.int64)
    rest = total - int(base.sum())
    order = np.lexsort((np.arange(len(raw)), -(raw - base)))
    base[order[:rest]] += 1
    return base


def build_schedule(initial: int, budget: int, steps: int, mode: str = "vertex") -> GrowthSchedule:
    """Cumulative target counts for densification steps ``0..steps``.

    ``vertex`` uses ``B - (B - S) (1 - k/N)^2``: it starts at ``S``, ends at
    ``B`` with zero slope, and its per-step increments shrink linearly.
    Integer increments are apportioned by largest remainder so the endpoints
    stay exact and the increments stay non-increasing.

    ``paper-eq2`` evaluates ``(B - S - 2N)/N^2 k^2 + 2k + B`` verbatim, for
    comparison only; it does not start at ``S``.
    """
    if steps < 1:
        raise ValueError("need at least one densification step")
    if budget < initial:
        raise ValueError(f"budget {budget} is smaller than the initial count {initial}")
    k = np.arange(steps + 1, dtype=np.float64)
    if mode == "paper-eq2":
        targets = np.rint((budget - initial - 2 * steps) / steps ** 2 * k ** 2 + 2 * k + budget)
        return GrowthSchedule(initial, budget, steps, targets.astype(np.int64))
    if mode != "vertex":
        raise ValueError(f"unknown schedule mode {mode!r}")
    targets = np.full(steps + 1, initial, dtype=np.int64)
    if budget > initial:
        # real increments (B - S)(2N - 2k + 1) / N^2 for k = 1..N
        weights = 2.0 * steps - 2.0 * k[1:] + 1.0
        targets[1:] += np.cumsum(_apportion(budget - initial, weights))
    return GrowthSchedule(initial, budget, steps, targets)


def median_scale(values) -> np.ndarray:
    """Divide by the median of the non-zero entries, then clamp to [0, 10]."""
    values = np.asarray(values, dtype=np.float64)
    nz = values[values > 0]
    if nz.size == 0:
        return np.zeros_like(values)
    return np.clip(values / np.median(nz), 0.0, MEDIAN_CLAMP)


@dataclass
class ScoreReport:
    """Per-Gaussian score components summed over the sampled views.

    ``components`` holds the raw (unscaled) per-view values summed over
    views; ``scores`` is the sampling weight vector.
    """

    components: dict
    scores: np.ndarray
    photometric: list
    max_world_radius: np.ndarray
    max_screen_radius: np.ndarray
    view_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.scores)

    def select(self, index) -> None:
        self.scores = self.scores[index]
        self.max_world_radius = self.max_world_radius[index]
        self.max_screen_radius = self.max_screen_radius[index]
        self.components = {k: v[index] for k, v in self.components.items()}

    def append(self, sources) -> None:
        self.scores = np.concatenate([self.scores, self.scores[sources]])
        self.max_world_radius = np.concatenate([self.max_world_radius, self.max_world_radius[sources]])
        self.max_screen_radius = np.concatenate([self.max_screen_radius, self.max_screen_radius[sources]])
        self.components = {k: np.concatenate([v, v[sources]]) for k, v in self.components.items()}


def score_components(gaussians: GaussianSet, stats, avg_grad) -> dict:
    """Raw per-view values of the eight score components."""
    return {
        "grad": np.asarray(avg_grad, dtype=np.float64),
        "pix": stats.pixel_count,
        "dist": stats.distance_sum,
        "sal": stats.saliency_sum,
        "blend": stats.blend_weight_sum,
        "depth": stats.depth,
        "opac": gaussians.opacities(),
        "scale": np.prod(gaussians.scales(), axis=1),
    }


def combine_components(components: dict, weights: ScoreWeights) -> np.ndarray:
    """Weighted sum of median-scaled components for one view."""
    total = np.zeros(len(components["opac"]))
    for name in SCORE_COMPONENTS:
        total += getattr(weights, name) * median_scale(components[name])
    return total


def compute_scores(gaussians: GaussianSet, views, config: TrainConfig, grad_stats=None,
                   sh_degree: int = 3) -> ScoreReport:
    """Accumulate densification scores over sampled training views.

    ``views`` are cameras carrying their ground-truth ``image`` (and an
    optional ROI ``mask``). For each view the saliency map is built from the
    current render, coverage statistics are gathered, components are median
    scaled and weighted, and the sum is multiplied by that view's mean L1.
    """
    views = list(views)
    if not views:
        raise ValueError("at least one sampled view is required")
    n = gaussians.count
    avg_grad = np.zeros(n) if grad_stats is None else (
        grad_stats.average() if isinstance(grad_stats, DensificationStats) else np.asarray(grad_stats))
    if len(avg_grad) != n:
        raise ValueError("gradient statistics do not match the model size")
    scores = np.zeros(n)
    summed = {k: np.zeros(n) for k in SCORE_COMPONENTS}
    photometric = []
    max_world = np.zeros(n)
    max_screen = np.zeros(n)
    for cam in views:
        if cam.image is None:
            raise ValueError(f"view {cam.name!r} has no ground-truth image")
        splats = project(gaussians, cam, sh_degree)
        rendered = render(splats, config.background, config.tight_culling).image
        p_i, _ = l1_loss(rendered, cam.image)
        sal = saliency(cam.image, rendered, cam.mask, config.lambda1, config.lambda2)
        _, stats = render_with_stats(splats, sal, config.background, config.tight_culling)
        comps = score_components(gaussians, stats, avg_grad)
        for k in SCORE_COMPONENTS:
            summed[k] += comps[k]
        scores += p_i * combine_components(comps, config.score_weights)
        photometric.append(p_i)
        max_screen = np.maximum(max_screen, stats.screen_radius)
        max_world = np.maximum(max_world, stats.screen_radius * stats.depth / cam.fx)
    return ScoreReport(summed, scores, photometric, max_world, max_screen, [c.name for c in views])


def sample_candidates(scores, count: int, rng: np.random.Generator, replace: bool = False) -> np.ndarray:
    """Draw ``count`` indices with probability proportional to ``scores``.

    Without replacement this uses exponential keys: each index gets
    ``E_i / w_i`` with ``E_i ~ Exp(1)`` and the smallest keys win, which
    matches sequential proportional draws. Zero-weight indices sort last.
    """
    w = np.asarray(scores.scores if isinstance(scores, ScoreReport) else scores, dtype=np.float64)
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.zeros(0, np.int64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("scores must be finite and non-negative")
    if w.sum() <= 0:
        raise ValueError("scores sum to zero")
    if replace:
        return rng.choice(len(w), size=count, p=w / w.sum()).astype(np.int64)
    if count > len(w):
        raise ValueError(f"cannot draw {count} distinct Gaussians from {len(w)}")
    keys = rng.standard_exponential(len(w))
    with np.errstate(divide="ignore"):
        keys = np.where(w > 0, keys / w, np.inf)
    return np.argsort(keys, kind="stable")[:count].astype(np.int64)


@dataclass
class DensifyReport:
    step: int
    target: int
    live_before: int
    pruned: int = 0
    added: int = 0
    split: int = 0
    clone: int = 0
    live_after: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _split_children(gaussians: GaussianSet, parents, rng: np.random.Generator) -> GaussianSet:
    children = gaussians.subset(np.repeat(parents, 2))
    if len(parents) == 0:
        return children
    R = quaternion_to_rotation(children.rotations)
    local = rng.standard_normal((len(children), 3)) * children.scales()
    children.positions = children.positions + np.einsum("nij,nj->ni", R, local)
    children.log_scales = children.log_scales - math.log(SPLIT_SCALE_DIVISOR)
    return children


def densify_step(gaussians: GaussianSet, schedule: GrowthSchedule, step_index: int, scores: ScoreReport,
                 config: TrainConfig, rng: np.random.Generator, grad_stats: DensificationStats | None = None,
                 optimizer=None, scene_extent: float = 1.0):
    """Prune transparent Gaussians, then grow the model to the step's target.

    Candidates above the gradient threshold split when their radius exceeds
    the radius threshold; all others are cloned, so exactly
    ``max(0, target - live)`` Gaussians are added. When the deficit exceeds
    the live count, drawing repeats in rounds over the grown set.

    ``scores``, ``grad_stats`` and ``optimizer`` are re-indexed alongside the
    model. Returns ``(gaussians, DensifyReport)``.
    """
    if step_index < 1 or step_index > schedule.steps:
        return gaussians, DensifyReport(step_index, gaussians.count, gaussians.count,
                                        live_after=gaussians.count)
    if len(scores) != gaussians.count:
        raise ValueError("score report does not match the model size")
    target = schedule.target(step_index)
    report = DensifyReport(step_index, target, gaussians.count)

    def reindex(index):
        scores.select(index)
        if grad_stats is not None:
            grad_stats.select(index)
        if optimizer is not None:
            optimizer.select(index)
        return gaussians.subset(index)

    keep = gaussians.opacities() >= config.prune_opacity_epsilon
    if not keep.all() and keep.any():
        report.pruned = int((~keep).sum())
        gaussians = reindex(np.nonzero(keep)[0])

    remaining = max(0, target - gaussians.count)
    radius = scores.max_world_radius
    radius_threshold = config.radius_threshold_fraction * scene_extent
    while remaining > 0:
        weights = scores.scores if scores.scores.sum() > 0 else np.ones(gaussians.count)
        k = remaining if config.sample_with_replacement else min(remaining, gaussians.count)
        picked = sample_candidates(weights, k, rng, config.sample_with_replacement)
        avg_grad = grad_stats.average() if grad_stats is not None else np.zeros(gaussians.count)
        if config.split_radius_mode == "world":
            radius = gaussians.scales().max(axis=1)
        else:
            radius = scores.max_world_radius
        split_mask = (avg_grad[picked] > config.grad_threshold) & (radius[picked] > radius_threshold)
        if config.sample_with_replacement:
            # a Gaussian drawn twice is split at most once
            _, first = np.unique(picked, return_index=True)
            once = np.zeros(len(picked), bool)
            once[first] = True
            split_mask &= once
        split_parents = picked[split_mask]
        clone_sources = picked[~split_mask]
        children = _split_children(gaussians, split_parents, rng)
        sources = np.concatenate([clone_sources, np.repeat(split_parents, 2)])
        grown = gaussians.extend(gaussians.subset(clone_sources)).extend(children)
        scores.append(sources)
        if grad_stats is not None:
            grad_stats.grad_norm_sum = np.concatenate([grad_stats.grad_norm_sum, np.zeros(len(sources))])
            grad_stats.hits = np.concatenate([grad_stats.hits, np.zeros(len(sources), np.int64)])
        if optimizer is not None:
            optimizer.append(sources)
        gaussians = grown
        if len(split_parents):
            survivors = np.ones(gaussians.count, bool)
            survivors[split_parents] = False
            gaussians = reindex(np.nonzero(survivors)[0])
        report.split += len(split_parents)
        report.clone += len(clone_sources)
        remaining -= len(picked)
    report.added = report.split + report.clone
    report.live_after = gaussians.count
    return gaussians, report
