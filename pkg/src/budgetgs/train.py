"""Training loop, evaluation, rendering and backward-engine benchmarking.

All randomness comes from one ``numpy.random.default_rng(config.seed)``.
Draw order:

1. a permutation of the training views whenever the previous one is used up;
2. at each densification event, the sampled scoring views (without
   replacement), then one exponential key per Gaussian for every sampling
   round, then one standard normal triple per split child.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backward import DensificationStats, backward, backward_per_pixel, backward_per_splat
from .config import TrainConfig
from .core import GaussianSet, OpacityMode, inverse_sigmoid
from .densify import build_schedule, compute_scores, densify_step
from .loss import photometric_loss, psnr, ssim
from .optim import AdamState, switch_to_high_opacity
from .projection import project
from .raster import render

log = logging.getLogger(__name__)

PHASES = ("setup", "forward", "loss", "backward", "optimizer", "densify", "bookkeeping", "evaluation")


@dataclass
class RunReport:
    budget: int
    initial_count: int
    final_count: int = 0
    peak_count: int = 0
    iterations: int = 0
    losses: list = field(default_factory=list)
    densify: list = field(default_factory=list)
    switch_iteration: int | None = None
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=lambda: {p: 0.0 for p in PHASES})
    total_seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _finite(x):
    # JSON has no infinity; identical images are reported as null PSNR
    return None if isinstance(x, float) and not math.isfinite(x) else x


def sh_degree_at(iteration: int, config: TrainConfig) -> int:
    if config.sh_degree_interval <= 0:
        return config.max_sh_degree
    return min(config.max_sh_degree, iteration // config.sh_degree_interval)


def initial_gaussians(points, colors, config: TrainConfig) -> GaussianSet:
    return GaussianSet.from_points(points, colors, config.initial_opacity)


def _reset_opacity(gaussians: GaussianSet, optimizer: AdamState, ceiling: float = 0.01) -> None:
    if gaussians.opacity_mode is OpacityMode.SIGMOID:
        o = np.minimum(gaussians.opacities(), ceiling)
        gaussians.raw_opacities = inverse_sigmoid(o)
    else:
        gaussians.raw_opacities = np.minimum(np.abs(gaussians.raw_opacities), ceiling)
    optimizer.reset_group("raw_opacities")


class _Metrics:
    def __init__(self, path):
        self.fh = open(path, "w") if path is not None else None

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, default=_json_default) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def train(bundle, config: TrainConfig, metrics_path=None, gaussians: GaussianSet | None = None,
          callback=None):
    """Optimize a Gaussian model on ``bundle.train_cameras``.

    Returns ``(gaussians, RunReport)``. ``callback(iteration, gaussians,
    context)`` runs at the end of each iteration when given; ``context`` is
    a dict with the optimizer and the densification statistics.
    """
    config.validate()
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    views = list(bundle.train_cameras)
    if not views or any(v.image is None for v in views):
        raise ValueError("every training camera needs a ground-truth image")
    if gaussians is None:
        gaussians = initial_gaussians(bundle.points, bundle.colors, config)
    initial = gaussians.count
    budget = config.resolve_budget(initial)
    steps = config.densify_steps
    schedule = build_schedule(initial, budget, steps, config.schedule) if steps >= 1 else None
    optimizer = AdamState.create(gaussians, config.learning_rates, bundle.scene_extent, config.total_iterations,
                                 config.sh_batch_interval, config.sh_batch_reduction)
    stats = DensificationStats(initial)
    report = RunReport(budget, initial, peak_count=initial, config=config.to_dict())
    timings = report.timings
    metrics = _Metrics(metrics_path)
    order = np.zeros(0, np.int64)
    cursor = 0
    background = config.background
    timings["setup"] = time.perf_counter() - t_start
    try:
        for it in range(1, config.total_iterations + 1):
            t0 = time.perf_counter()
            if cursor >= len(order):
                order = rng.permutation(len(views))
                cursor = 0
            cam = views[order[cursor]]
            cursor += 1
            degree = sh_degree_at(it, config)
            splats = project(gaussians, cam, degree)
            art = render(splats, background, config.tight_culling)
            t1 = time.perf_counter()
            loss, d_image = photometric_loss(art.image, cam.image, config.ssim_weight)
            t2 = time.perf_counter()
            grads = backward(art, splats, gaussians, cam, d_image, config.backward)
            stats.accumulate(grads, it)
            t3 = time.perf_counter()
            optimizer.step(gaussians, grads, it)
            t4 = time.perf_counter()
            timings["forward"] += t1 - t0
            timings["loss"] += t2 - t1
            timings["backward"] += t3 - t2
            timings["optimizer"] += t4 - t3

            step_index = config.densify_step_index(it)
            if schedule is not None and step_index is not None and step_index <= schedule.steps:
                k = min(config.sampled_view_count, len(views))
                sampled = [views[i] for i in rng.choice(len(views), size=k, replace=False)]
                scores = compute_scores(gaussians, sampled, config, stats, degree)
                gaussians, step = densify_step(gaussians, schedule, step_index, scores, config, rng, stats,
                                               optimizer, bundle.scene_extent)
                stats.reset(gaussians.count)
                rec = {"event": "densify", "iteration": it, **step.as_dict()}
                report.densify.append(rec)
                metrics.write(rec)
            if (config.opacity_reset_interval and it % config.opacity_reset_interval == 0
                    and it < config.densify_end):
                _reset_opacity(gaussians, optimizer)
            if switch_to_high_opacity(gaussians, it, config.switch_iteration, optimizer,
                                      config.high_opacity_lr_scale):
                report.switch_iteration = it
                metrics.write({"event": "high_opacity_switch", "iteration": it})
            t5 = time.perf_counter()
            timings["densify"] += t5 - t4

            report.peak_count = max(report.peak_count, gaussians.count)
            report.losses.append(float(loss))
            if config.log_every and it % config.log_every == 0:
                metrics.write({"event": "iteration", "iteration": it, "loss": float(loss),
                               "count": gaussians.count, "view": cam.name, "sh_degree": degree})
            if callback is not None:
                callback(it, gaussians, {"optimizer": optimizer, "stats": stats, "camera": cam})
            timings["bookkeeping"] += time.perf_counter() - t5
    finally:
        metrics.close()
    t_eval = time.perf_counter()
    report.iterations = config.total_iterations
    report.final_count = gaussians.count
    degree = sh_degree_at(config.total_iterations, config)
    report.metrics["train"] = summarize(evaluate(gaussians, views, background, degree, config.tight_culling))
    if bundle.test_cameras and all(c.image is not None for c in bundle.test_cameras):
        report.metrics["test"] = summarize(evaluate(gaussians, bundle.test_cameras, background, degree,
                                                    config.tight_culling))
    end = time.perf_counter()
    timings["evaluation"] = end - t_eval
    report.total_seconds = end - t_start
    return gaussians, report


def render_image(gaussians: GaussianSet, camera, background=(0.0, 0.0, 0.0), sh_degree: int = 3,
                 tight: bool = True) -> np.ndarray:
    return render(project(gaussians, camera, sh_degree), background, tight).image


def evaluate(gaussians: GaussianSet, cameras, background=(0.0, 0.0, 0.0), sh_degree: int = 3,
             tight: bool = True) -> list:
    """Per-view ``{"view", "psnr", "ssim"}`` rows."""
    rows = []
    for cam in cameras:
        if cam.image is None:
            raise ValueError(f"view {cam.name!r} has no ground-truth image")
        img = render_image(gaussians, cam, background, sh_degree, tight)
        rows.append({"view": cam.name, "psnr": psnr(img, cam.image), "ssim": ssim(img, cam.image, False)[0]})
    return rows


def summarize(rows) -> dict:
    if not rows:
        return {"views": [], "mean_psnr": None, "mean_ssim": None}
    return {
        "views": [{**r, "psnr": _finite(r["psnr"])} for r in rows],
        "mean_psnr": _finite(float(np.mean([r["psnr"] for r in rows]))),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }


def bench_backward(bundle, gaussians: GaussianSet, repeats: int = 5, background=(0.0, 0.0, 0.0),
                   tolerance: float = 1e-5) -> dict:
    """Time both backward engines on identical workloads.

    The engines are first checked for gradient agreement on every view; a
    mismatch raises ``AssertionError`` before any timing is recorded.
    """
    workloads = []
    for cam in bundle.train_cameras:
        splats = project(gaussians, cam)
        art = render(splats, background)
        _, d_image = photometric_loss(art.image, cam.image)
        workloads.append((art, splats, d_image))
    max_err = 0.0
    for art, splats, d_image in workloads:
        a = backward_per_pixel(art, splats, d_image)
        b = backward_per_splat(art, splats, d_image)
        for name in ("mean2d", "conic", "opacity", "rgb"):
            x, y = getattr(b, name), getattr(a, name)
            scale = max(float(np.abs(y).max(initial=0.0)), 1e-30)
            max_err = max(max_err, float(np.abs(x - y).max(initial=0.0)) / scale)
    if max_err > tolerance:
        raise AssertionError(f"backward engines disagree: max relative error {max_err:.3e}")
    rows = []
    for engine, fn in (("per-pixel", backward_per_pixel), ("per-splat", backward_per_splat)):
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for art, splats, d_image in workloads:
                fn(art, splats, d_image)
            samples.append(time.perf_counter() - t0)
        rows.append({"engine": engine, "mean_seconds": float(np.mean(samples)),
                     "std_seconds": float(np.std(samples)), "repeats": repeats, "views": len(workloads)})
    return {"max_relative_error": max_err, "splats": int(sum(len(w[1]) for w in workloads)), "rows": rows}
