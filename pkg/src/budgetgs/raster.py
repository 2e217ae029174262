"""Tile-based front-to-back splat rasterization.

Each 16x16 tile keeps a depth-ordered list of the splats overlapping it
(CSR layout: ``tile_offsets`` / ``tile_entries``). Besides the image, the
forward pass records what the backward engines need: final transmittance,
the last contributing list position per pixel, its tile-wide maximum, and
pixel states ``(T, rgb)`` before every 32nd list position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .projection import Splats

TILE = 16
TILE_PIXELS = TILE * TILE
CHECKPOINT_STRIDE = 32
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
_CULL_SLACK = 1.0 - 1e-9


@dataclass
class RenderArtifacts:
    image: np.ndarray
    final_transmittance: np.ndarray
    last_contributor: np.ndarray
    tile_offsets: np.ndarray
    tile_entries: np.ndarray
    tile_max_contributor: np.ndarray
    checkpoint_offsets: np.ndarray
    checkpoint_T: np.ndarray
    checkpoint_rgb: np.ndarray
    background: np.ndarray
    width: int
    height: int

    @property
    def tiles_x(self) -> int:
        return (self.width + TILE - 1) // TILE

    @property
    def tiles_y(self) -> int:
        return (self.height + TILE - 1) // TILE

    def tile_list(self, tile: int) -> np.ndarray:
        return self.tile_entries[self.tile_offsets[tile]:self.tile_offsets[tile + 1]]


@dataclass
class GaussianViewStats:
    """Per-Gaussian coverage statistics of one view (full model size)."""

    pixel_count: np.ndarray
    distance_sum: np.ndarray
    saliency_sum: np.ndarray
    blend_weight_sum: np.ndarray
    depth: np.ndarray
    screen_radius: np.ndarray


@numba.njit(cache=True)
def _box_min_quadratic(mx, my, a, b, c, xlo, xhi, ylo, yhi):
    # min over the box of a dx^2 + 2 b dx dy + c dy^2, d = p - m
    if xlo <= mx <= xhi and ylo <= my <= yhi:
        return 0.0
    best = np.inf
    for k in range(2):
        dx = (xlo if k == 0 else xhi) - mx
        dy = -b * dx / c
        dy = min(max(dy, ylo - my), yhi - my)
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        if q < best:
            best = q
        dy = (ylo if k == 0 else yhi) - my
        dx = -b * dy / a
        dx = min(max(dx, xlo - mx), xhi - mx)
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        if q < best:
            best = q
    return best


@numba.njit(cache=True)
def _tile_max_alpha(mx, my, a, b, c, opacity, tx, ty, width, height):
    xlo = tx * TILE + 0.5
    xhi = min(tx * TILE + TILE, width) - 0.5
    ylo = ty * TILE + 0.5
    yhi = min(ty * TILE + TILE, height) - 0.5
    q = _box_min_quadratic(mx, my, a, b, c, xlo, xhi, ylo, yhi)
    return min(ALPHA_MAX, opacity * math.exp(-0.5 * q))


@numba.njit(cache=True)
def _tile_range(mx, my, r, width, height, tiles_x, tiles_y):
    px0 = max(math.ceil(mx - r - 0.5), 0)
    px1 = min(math.floor(mx + r - 0.5), width - 1)
    py0 = max(math.ceil(my - r - 0.5), 0)
    py1 = min(math.floor(my + r - 0.5), height - 1)
    if px1 < px0 or py1 < py0:
        return 0, -1, 0, -1
    return px0 // TILE, px1 // TILE, py0 // TILE, py1 // TILE


@numba.njit(cache=True)
def _splat_tile_hit(mean2d, conic, opacity, i, tx, ty, width, height, tight):
    if not tight:
        return True
    amax = _tile_max_alpha(mean2d[i, 0], mean2d[i, 1], conic[i, 0], conic[i, 1], conic[i, 2],
                           opacity[i], tx, ty, width, height)
    return amax >= ALPHA_MIN * _CULL_SLACK


@numba.njit(cache=True)
def _bin_splats(mean2d, conic, opacity, radius, width, height, tight):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    offsets = np.zeros(n_tiles + 1, np.int64)
    n = mean2d.shape[0]
    for i in range(n):
        tx0, tx1, ty0, ty1 = _tile_range(mean2d[i, 0], mean2d[i, 1], radius[i], width, height,
                                         tiles_x, tiles_y)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                if _splat_tile_hit(mean2d, conic, opacity, i, tx, ty, width, height, tight):
                    offsets[ty * tiles_x + tx + 1] += 1
    for t in range(n_tiles):
        offsets[t + 1] += offsets[t]
    cursor = offsets[:-1].copy()
    entries = np.empty(offsets[n_tiles], np.int64)
    # splats arrive depth-sorted, so each tile list stays sorted
    for i in range(n):
        tx0, tx1, ty0, ty1 = _tile_range(mean2d[i, 0], mean2d[i, 1], radius[i], width, height,
                                         tiles_x, tiles_y)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                if _splat_tile_hit(mean2d, conic, opacity, i, tx, ty, width, height, tight):
                    t = ty * tiles_x + tx
                    entries[cursor[t]] = i
                    cursor[t] += 1
    return offsets, entries


@numba.njit(cache=True)
def _render_kernel(width, height, offsets, entries, mean2d, conic, opacity, rgb, bg,
                   ckpt_offsets, saliency, with_stats):
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = len(offsets) - 1
    image = np.zeros((height, width, 3))
    final_T = np.ones((height, width))
    last = np.zeros((height, width), np.int64)
    tile_max = np.zeros(n_tiles, np.int64)
    n_ck = ckpt_offsets[n_tiles]
    ck_T = np.ones((n_ck, TILE_PIXELS))
    ck_rgb = np.zeros((n_ck, TILE_PIXELS, 3))
    n_entries = len(entries)
    st_count = np.zeros(n_entries)
    st_dist = np.zeros(n_entries)
    st_sal = np.zeros(n_entries)
    st_blend = np.zeros(n_entries)

    for tile in range(n_tiles):
        start = offsets[tile]
        count = offsets[tile + 1] - start
        cbase = ckpt_offsets[tile]
        n_buckets = ckpt_offsets[tile + 1] - cbase
        tx = tile % tiles_x
        ty = tile // tiles_x
        tmax = 0
        for ly in range(TILE):
            py = ty * TILE + ly
            for lx in range(TILE):
                px = tx * TILE + lx
                if px >= width or py >= height:
                    continue
                lp = ly * TILE + lx
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                contributor = 0
                for j in range(count):
                    if j % CHECKPOINT_STRIDE == 0:
                        k = cbase + j // CHECKPOINT_STRIDE
                        ck_T[k, lp] = T
                        ck_rgb[k, lp, 0] = cr
                        ck_rgb[k, lp, 1] = cg
                        ck_rgb[k, lp, 2] = cb
                    s = entries[start + j]
                    dx = fx - mean2d[s, 0]
                    dy = fy - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = min(ALPHA_MAX, opacity[s] * math.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        for kk in range(j // CHECKPOINT_STRIDE + 1, n_buckets):
                            ck_T[cbase + kk, lp] = T
                            ck_rgb[cbase + kk, lp, 0] = cr
                            ck_rgb[cbase + kk, lp, 1] = cg
                            ck_rgb[cbase + kk, lp, 2] = cb
                        break
                    w = alpha * T
                    cr += rgb[s, 0] * w
                    cg += rgb[s, 1] * w
                    cb += rgb[s, 2] * w
                    if with_stats:
                        e = start + j
                        st_count[e] += 1.0
                        st_dist[e] += math.sqrt(dx * dx + dy * dy)
                        st_sal[e] += saliency[py, px]
                        st_blend[e] += w
                    T = test_T
                    contributor = j + 1
                image[py, px, 0] = cr + T * bg[0]
                image[py, px, 1] = cg + T * bg[1]
                image[py, px, 2] = cb + T * bg[2]
                final_T[py, px] = T
                last[py, px] = contributor
                if contributor > tmax:
                    tmax = contributor
        tile_max[tile] = tmax
    return image, final_T, last, tile_max, ck_T, ck_rgb, st_count, st_dist, st_sal, st_blend


@numba.njit(cache=True)
def _merge_entry_stats(entries, n_splats, st_count, st_dist, st_sal, st_blend):
    out = np.zeros((n_splats, 4))
    for e in range(len(entries)):
        s = entries[e]
        out[s, 0] += st_count[e]
        out[s, 1] += st_dist[e]
        out[s, 2] += st_sal[e]
        out[s, 3] += st_blend[e]
    return out


def bin_splats(splats: Splats, tight: bool = True):
    """Assign splats to tiles; returns CSR ``(offsets, entries)``."""
    if len(splats) == 0:
        n_tiles = ((splats.width + TILE - 1) // TILE) * ((splats.height + TILE - 1) // TILE)
        return np.zeros(n_tiles + 1, np.int64), np.zeros(0, np.int64)
    return _bin_splats(splats.mean2d, splats.conic, splats.opacity, splats.radius,
                       splats.width, splats.height, tight)


def tight_cull(mean2d, conic, opacity, tile_x: int, tile_y: int, width: int, height: int) -> bool:
    """True when the splat can reach alpha >= 1/255 somewhere in the tile.

    The maximum of the Gaussian over the rectangle of pixel centers is found
    exactly by minimizing the conic quadratic along the rectangle's edges.
    """
    amax = _tile_max_alpha(float(mean2d[0]), float(mean2d[1]), float(conic[0]), float(conic[1]),
                           float(conic[2]), float(opacity), tile_x, tile_y, width, height)
    return bool(amax >= ALPHA_MIN * _CULL_SLACK)


def _rasterize(splats: Splats, background, saliency: Optional[np.ndarray], tight: bool):
    background = np.asarray(background, dtype=np.float64).reshape(3)
    offsets, entries = bin_splats(splats, tight)
    counts = np.diff(offsets)
    ckpt_offsets = np.zeros(len(offsets), np.int64)
    ckpt_offsets[1:] = np.cumsum((counts + CHECKPOINT_STRIDE - 1) // CHECKPOINT_STRIDE)
    with_stats = saliency is not None
    sal = np.zeros((1, 1)) if saliency is None else np.ascontiguousarray(saliency, dtype=np.float64)
    n = len(splats)
    out = _render_kernel(
        splats.width, splats.height, offsets, entries,
        np.ascontiguousarray(splats.mean2d).reshape(n, 2), np.ascontiguousarray(splats.conic).reshape(n, 3),
        np.ascontiguousarray(splats.opacity).reshape(n), np.ascontiguousarray(splats.rgb).reshape(n, 3),
        background, ckpt_offsets, sal, with_stats)
    image, final_T, last, tile_max, ck_T, ck_rgb = out[:6]
    artifacts = RenderArtifacts(image, final_T, last, offsets, entries, tile_max, ckpt_offsets,
                                ck_T, ck_rgb, background, splats.width, splats.height)
    return artifacts, out[6:]


def render(splats: Splats, background=(0.0, 0.0, 0.0), tight: bool = True) -> RenderArtifacts:
    """Alpha-blend depth-sorted splats front to back into an ``(H, W, 3)`` image."""
    artifacts, _ = _rasterize(splats, background, None, tight)
    return artifacts


def render_with_stats(splats: Splats, saliency, background=(0.0, 0.0, 0.0),
                      tight: bool = True):
    """Render and gather per-Gaussian coverage statistics.

    For every (pixel, splat) pair that is actually blended the splat gets one
    pixel count, the pixel's distance to the splat center, the pixel's
    saliency and its blending weight ``alpha * T``. Accumulation goes to
    per-entry slots first and is merged in list order, so results do not
    depend on traversal scheduling.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != (splats.height, splats.width):
        raise ValueError("saliency map does not match the image size")
    artifacts, (st_count, st_dist, st_sal, st_blend) = _rasterize(splats, background, saliency, tight)
    per_splat = _merge_entry_stats(artifacts.tile_entries, len(splats), st_count, st_dist, st_sal, st_blend)
    n = splats.num_gaussians
    g = splats.gaussian_index
    stats = GaussianViewStats(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))
    stats.pixel_count[g] = per_splat[:, 0]
    stats.distance_sum[g] = per_splat[:, 1]
    stats.saliency_sum[g] = per_splat[:, 2]
    stats.blend_weight_sum[g] = per_splat[:, 3]
    stats.depth[g] = splats.depth
    stats.screen_radius[g] = splats.radius
    return artifacts, stats
