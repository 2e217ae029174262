"""Rasterizer gradients: per-pixel reference engine and per-splat bucketed engine.

Both engines share ``_splat_pixel_grad`` for the math of one (pixel, splat)
pair and differ only in traversal and accumulation:

* per-pixel walks each pixel's list back to front, recovering transmittance
  by division and adding straight into per-splat sums;
* per-splat splits every tile list into buckets of 32 entries, starts each
  bucket from the checkpointed pixel states, advances the states front to
  back and writes into entry-private slots that are merged in list order.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import Camera, GaussianSet
from .projection import Splats, project_vjp
from .raster import ALPHA_MAX, ALPHA_MIN, CHECKPOINT_STRIDE, TILE, RenderArtifacts

ENGINES = ("per-pixel", "per-splat")


@dataclass
class SplatGrads:
    """Screen-space gradients, one row per splat in sorted order."""

    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    rgb: np.ndarray
    seconds: float = 0.0
    buckets_per_tile: np.ndarray = None
    skipped_buckets: int = 0


@dataclass
class GaussianGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    raw_opacities: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray
    mean2d: np.ndarray
    visible: np.ndarray
    splat: SplatGrads = field(default=None, repr=False)

    PARAMS = ("positions", "rotations", "log_scales", "raw_opacities", "sh_dc", "sh_rest")

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, 15, 3)), np.zeros((n, 2)), np.zeros(n, bool))


@numba.njit(cache=True, inline="always")
def _splat_pixel_grad(k, g0, g1, g2, T_i, S0, S1, S2, alpha, G, o, s_rgb, dx, dy, ca, cb, cc,
                      d_rgb, d_opacity, d_conic, d_mean):
    w = alpha * T_i
    d_rgb[k, 0] += w * g0
    d_rgb[k, 1] += w * g1
    d_rgb[k, 2] += w * g2
    if o * G >= ALPHA_MAX:
        return
    inv = 1.0 / (1.0 - alpha)
    d_alpha = (g0 * (T_i * s_rgb[0] - S0 * inv) + g1 * (T_i * s_rgb[1] - S1 * inv)
               + g2 * (T_i * s_rgb[2] - S2 * inv))
    d_opacity[k] += G * d_alpha
    d_power = alpha * d_alpha
    d_conic[k, 0] += -0.5 * dx * dx * d_power
    d_conic[k, 1] += -dx * dy * d_power
    d_conic[k, 2] += -0.5 * dy * dy * d_power
    d_mean[k, 0] += d_power * (ca * dx + cb * dy)
    d_mean[k, 1] += d_power * (cc * dy + cb * dx)


@numba.njit(cache=True)
def _per_pixel_kernel(width, height, offsets, entries, mean2d, conic, opacity, rgb, bg,
                      image, final_T, last, dL_dimg, n_splats):
    tiles_x = (width + TILE - 1) // TILE
    d_rgb = np.zeros((n_splats, 3))
    d_opacity = np.zeros(n_splats)
    d_conic = np.zeros((n_splats, 3))
    d_mean = np.zeros((n_splats, 2))
    for tile in range(len(offsets) - 1):
        start = offsets[tile]
        tx = tile % tiles_x
        ty = tile // tiles_x
        for ly in range(TILE):
            py = ty * TILE + ly
            for lx in range(TILE):
                px = tx * TILE + lx
                if px >= width or py >= height:
                    continue
                g0 = dL_dimg[py, px, 0]
                g1 = dL_dimg[py, px, 1]
                g2 = dL_dimg[py, px, 2]
                T = final_T[py, px]
                S0 = T * bg[0]
                S1 = T * bg[1]
                S2 = T * bg[2]
                fx = px + 0.5
                fy = py + 0.5
                for j in range(last[py, px] - 1, -1, -1):
                    s = entries[start + j]
                    dx = fx - mean2d[s, 0]
                    dy = fy - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    G = math.exp(power)
                    alpha = min(ALPHA_MAX, opacity[s] * G)
                    if alpha < ALPHA_MIN:
                        continue
                    T_i = T / (1.0 - alpha)
                    _splat_pixel_grad(s, g0, g1, g2, T_i, S0, S1, S2, alpha, G, opacity[s], rgb[s],
                                      dx, dy, conic[s, 0], conic[s, 1], conic[s, 2],
                                      d_rgb, d_opacity, d_conic, d_mean)
                    w = alpha * T_i
                    S0 += rgb[s, 0] * w
                    S1 += rgb[s, 1] * w
                    S2 += rgb[s, 2] * w
                    T = T_i
    return d_mean, d_conic, d_opacity, d_rgb


@numba.njit(cache=True)
def _per_splat_kernel(width, height, offsets, entries, mean2d, conic, opacity, rgb,
                      image, last, tile_max, ck_offsets, ck_T, ck_rgb, dL_dimg, n_splats, skip_tail):
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = len(offsets) - 1
    n_entries = len(entries)
    e_rgb = np.zeros((n_entries, 3))
    e_opacity = np.zeros(n_entries)
    e_conic = np.zeros((n_entries, 3))
    e_mean = np.zeros((n_entries, 2))
    buckets = np.zeros(n_tiles, np.int64)
    skipped = 0
    T_state = np.empty(TILE * TILE)
    C_state = np.empty((TILE * TILE, 3))
    for tile in range(n_tiles):
        start = offsets[tile]
        count = offsets[tile + 1] - start
        tx = tile % tiles_x
        ty = tile // tiles_x
        x_end = min(tx * TILE + TILE, width)
        y_end = min(ty * TILE + TILE, height)
        for b in range(ck_offsets[tile + 1] - ck_offsets[tile]):
            first = b * CHECKPOINT_STRIDE
            if skip_tail and first >= tile_max[tile]:
                skipped += 1
                continue
            buckets[tile] += 1
            ck = ck_offsets[tile] + b
            for lp in range(TILE * TILE):
                T_state[lp] = ck_T[ck, lp]
                C_state[lp, 0] = ck_rgb[ck, lp, 0]
                C_state[lp, 1] = ck_rgb[ck, lp, 1]
                C_state[lp, 2] = ck_rgb[ck, lp, 2]
            for j in range(first, min(first + CHECKPOINT_STRIDE, count)):
                e = start + j
                s = entries[e]
                mx = mean2d[s, 0]
                my = mean2d[s, 1]
                ca = conic[s, 0]
                cb = conic[s, 1]
                cc = conic[s, 2]
                o = opacity[s]
                for py in range(ty * TILE, y_end):
                    for px in range(tx * TILE, x_end):
                        if j >= last[py, px]:
                            continue
                        dx = px + 0.5 - mx
                        dy = py + 0.5 - my
                        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                        if power > 0.0:
                            continue
                        G = math.exp(power)
                        alpha = min(ALPHA_MAX, o * G)
                        if alpha < ALPHA_MIN:
                            continue
                        lp = (py - ty * TILE) * TILE + (px - tx * TILE)
                        T_i = T_state[lp]
                        w = alpha * T_i
                        a0 = C_state[lp, 0] + rgb[s, 0] * w
                        a1 = C_state[lp, 1] + rgb[s, 1] * w
                        a2 = C_state[lp, 2] + rgb[s, 2] * w
                        # color behind this splat, background included
                        _splat_pixel_grad(e, dL_dimg[py, px, 0], dL_dimg[py, px, 1], dL_dimg[py, px, 2],
                                          T_i, image[py, px, 0] - a0, image[py, px, 1] - a1,
                                          image[py, px, 2] - a2, alpha, G, o, rgb[s], dx, dy, ca, cb, cc,
                                          e_rgb, e_opacity, e_conic, e_mean)
                        C_state[lp, 0] = a0
                        C_state[lp, 1] = a1
                        C_state[lp, 2] = a2
                        T_state[lp] = T_i * (1.0 - alpha)
    d_rgb = np.zeros((n_splats, 3))
    d_opacity = np.zeros(n_splats)
    d_conic = np.zeros((n_splats, 3))
    d_mean = np.zeros((n_splats, 2))
    for e in range(n_entries):
        s = entries[e]
        for c in range(3):
            d_rgb[s, c] += e_rgb[e, c]
            d_conic[s, c] += e_conic[e, c]
        d_opacity[s] += e_opacity[e]
        d_mean[s, 0] += e_mean[e, 0]
        d_mean[s, 1] += e_mean[e, 1]
    return d_mean, d_conic, d_opacity, d_rgb, buckets, skipped


def _check_shapes(artifacts: RenderArtifacts, splats: Splats, dL_dimage):
    if (splats.width, splats.height) != (artifacts.width, artifacts.height):
        raise ValueError("artifacts and splats come from different views")
    if len(artifacts.tile_entries) and artifacts.tile_entries.max() >= len(splats):
        raise ValueError("artifacts reference splats that do not exist")
    dL_dimage = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if dL_dimage.shape != artifacts.image.shape:
        raise ValueError(f"dL/dImage has shape {dL_dimage.shape}, expected {artifacts.image.shape}")
    return dL_dimage


def _splat_arrays(splats: Splats):
    n = len(splats)
    return (np.ascontiguousarray(splats.mean2d).reshape(n, 2), np.ascontiguousarray(splats.conic).reshape(n, 3),
            np.ascontiguousarray(splats.opacity).reshape(n), np.ascontiguousarray(splats.rgb).reshape(n, 3))


def backward_per_pixel(artifacts: RenderArtifacts, splats: Splats, dL_dimage) -> SplatGrads:
    """Reference engine: per pixel, back to front over its contributors."""
    dL_dimage = _check_shapes(artifacts, splats, dL_dimage)
    t0 = time.perf_counter()
    d_mean, d_conic, d_opacity, d_rgb = _per_pixel_kernel(
        artifacts.width, artifacts.height, artifacts.tile_offsets, artifacts.tile_entries,
        *_splat_arrays(splats), artifacts.background, artifacts.image,
        artifacts.final_transmittance, artifacts.last_contributor, dL_dimage, len(splats))
    return SplatGrads(d_mean, d_conic, d_opacity, d_rgb, time.perf_counter() - t0)


def backward_per_splat(artifacts: RenderArtifacts, splats: Splats, dL_dimage,
                       skip_tail: bool = True) -> SplatGrads:
    """Bucketed engine: 32-splat buckets restarted from forward checkpoints."""
    dL_dimage = _check_shapes(artifacts, splats, dL_dimage)
    counts = np.diff(artifacts.tile_offsets)
    expected = (counts + CHECKPOINT_STRIDE - 1) // CHECKPOINT_STRIDE
    if artifacts.checkpoint_T is None or not np.array_equal(np.diff(artifacts.checkpoint_offsets), expected):
        raise ValueError("render artifacts lack the stride-32 checkpoints")
    t0 = time.perf_counter()
    mean2d, conic, opacity, rgb = _splat_arrays(splats)
    d_mean, d_conic, d_opacity, d_rgb, buckets, skipped = _per_splat_kernel(
        artifacts.width, artifacts.height, artifacts.tile_offsets, artifacts.tile_entries,
        mean2d, conic, opacity, rgb, artifacts.image, artifacts.last_contributor,
        artifacts.tile_max_contributor, artifacts.checkpoint_offsets, artifacts.checkpoint_T,
        artifacts.checkpoint_rgb, dL_dimage, len(splats), skip_tail)
    return SplatGrads(d_mean, d_conic, d_opacity, d_rgb, time.perf_counter() - t0, buckets, int(skipped))


def splat_backward(artifacts, splats, dL_dimage, engine: str = "per-splat") -> SplatGrads:
    if engine == "per-pixel":
        return backward_per_pixel(artifacts, splats, dL_dimage)
    if engine == "per-splat":
        return backward_per_splat(artifacts, splats, dL_dimage)
    raise ValueError(f"unknown backward engine {engine!r}")


def gaussian_grads(splat_grads: SplatGrads, splats: Splats, gaussians: GaussianSet,
                   camera: Camera) -> GaussianGrads:
    """Chain splat gradients through projection, SH and activations."""
    chained = project_vjp(splats, gaussians, camera, splat_grads.mean2d, splat_grads.conic,
                          splat_grads.opacity, splat_grads.rgb)
    n = gaussians.count
    mean2d = np.zeros((n, 2))
    mean2d[splats.gaussian_index] = splat_grads.mean2d
    visible = np.zeros(n, bool)
    visible[splats.gaussian_index] = True
    return GaussianGrads(**chained, mean2d=mean2d, visible=visible, splat=splat_grads)


def backward(artifacts, splats, gaussians, camera, dL_dimage, engine: str = "per-splat") -> GaussianGrads:
    return gaussian_grads(splat_backward(artifacts, splats, dL_dimage, engine), splats, gaussians, camera)


class DensificationStats:
    """Running per-Gaussian sums of screen-space position gradient norms."""

    def __init__(self, n: int):
        self.grad_norm_sum = np.zeros(n)
        self.hits = np.zeros(n, np.int64)

    def __len__(self):
        return len(self.hits)

    def accumulate(self, grads: GaussianGrads, iteration: int = 0) -> None:
        vis = grads.visible
        self.grad_norm_sum[vis] += np.linalg.norm(grads.mean2d[vis], axis=1)
        self.hits[vis] += 1

    def average(self) -> np.ndarray:
        return np.divide(self.grad_norm_sum, self.hits, out=np.zeros_like(self.grad_norm_sum),
                         where=self.hits > 0)

    def select(self, index) -> None:
        self.grad_norm_sum = self.grad_norm_sum[index]
        self.hits = self.hits[index]

    def reset(self, n: int | None = None) -> None:
        n = len(self) if n is None else n
        self.grad_norm_sum = np.zeros(n)
        self.hits = np.zeros(n, np.int64)


def accumulate_densification_grad(stats: DensificationStats, grads: GaussianGrads,
                                  iteration: int = 0) -> DensificationStats:
    stats.accumulate(grads, iteration)
    return stats
