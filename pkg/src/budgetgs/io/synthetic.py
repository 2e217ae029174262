"""Synthetic scenes whose ground truth is exactly representable by the model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..core import SH_C0, SH_REST_COEFFS, Camera, GaussianSet, inverse_sigmoid
from ..projection import project
from ..raster import render
from .colmap import ImageRecord, Intrinsics, SceneBundle, scene_extent, write_colmap
from .images import save_image, save_mask


@dataclass
class SyntheticSpec:
    num_gaussians: int = 20
    num_cameras: int = 8
    width: int = 64
    height: int = 64
    num_test_cameras: int = 0
    sphere_radius: float = 0.7
    ring_radius: float = 2.5
    ring_height: float = 1.0
    arc_deg: float = 360.0
    fov_x_deg: float = 60.0
    scale_range: tuple = (0.08, 0.22)
    opacity_range: tuple = (0.6, 0.95)
    color_range: tuple = (0.1, 0.9)
    sh_rest_std: float = 0.0
    jitter: float = 0.03
    background: tuple = (0.0, 0.0, 0.0)


def random_gaussians(spec: SyntheticSpec, rng: np.random.Generator) -> GaussianSet:
    n = spec.num_gaussians
    # uniform in the ball: direction times radius ~ r * u^(1/3)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = d * (spec.sphere_radius * rng.random(n) ** (1 / 3))[:, None]
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    lo, hi = np.log(spec.scale_range)
    log_s = rng.uniform(lo, hi, (n, 3))
    opac = rng.uniform(*spec.opacity_range, n)
    rgb = rng.uniform(*spec.color_range, (n, 3))
    rest = spec.sh_rest_std * rng.standard_normal((n, SH_REST_COEFFS, 3))
    return GaussianSet(pos, q, log_s, inverse_sigmoid(opac), (rgb - 0.5) / SH_C0, rest)


def ring_cameras(spec: SyntheticSpec, count: int, phase: float = 0.0, prefix: str = "view") -> list:
    cams = []
    for k in range(count):
        if spec.arc_deg >= 360.0:
            a = 2 * math.pi * (k + phase) / max(count, 1)
        else:
            # views spread evenly over an arc centred on the +x axis
            a = math.radians(spec.arc_deg) * ((k + phase + 0.5) / max(count, 1) - 0.5)
        # alternate heights so the ring is not coplanar with any Gaussian layer
        z = spec.ring_height * (1.0 if k % 2 == 0 else -0.5)
        eye = (spec.ring_radius * math.cos(a), spec.ring_radius * math.sin(a), z)
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), spec.width, spec.height, spec.fov_x_deg,
                                   name=f"{prefix}_{k:03d}.png"))
    return cams


def make_synthetic_scene(spec: SyntheticSpec | None = None, rng: np.random.Generator | None = None):
    """Random ground-truth Gaussians, a camera ring, and GT images.

    GT images come from the package's own forward rasterizer, so the ground
    truth is reproducible exactly. SfM points are the GT centers plus
    ``jitter`` times standard normal noise, colored by the GT base color.
    Returns ``(SceneBundle, gt_gaussians)``.
    """
    spec = spec or SyntheticSpec()
    rng = rng if rng is not None else np.random.default_rng(0)
    gt = random_gaussians(spec, rng)
    train = ring_cameras(spec, spec.num_cameras)
    test = ring_cameras(spec, spec.num_test_cameras, phase=0.5, prefix="test")
    for cam in train + test:
        cam.image = render(project(gt, cam), spec.background).image
    points = gt.positions + spec.jitter * rng.standard_normal(gt.positions.shape)
    colors = np.clip(gt.sh_dc * SH_C0 + 0.5, 0.0, 1.0)
    extent = scene_extent([c.center for c in train + test])
    bundle = SceneBundle(train, test, points, colors, extent, "synthetic",
                         extra={"background": tuple(spec.background)})
    return bundle, gt


def quadrant_mask(width: int, height: int, quadrant: int = 0) -> np.ndarray:
    """Binary mask of one image quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)."""
    mask = np.zeros((height, width))
    ys = slice(0, height // 2) if quadrant < 2 else slice(height // 2, height)
    xs = slice(0, width // 2) if quadrant % 2 == 0 else slice(width // 2, width)
    mask[ys, xs] = 1.0
    return mask


def write_scene(bundle: SceneBundle, path, binary: bool = False) -> Path:
    """Write a bundle as reconstruction tables plus PNG images (and masks).

    Test cameras are placed at every 8th position (names ``NNNN.png``) so
    the loader's split recovers them; when there are fewer test cameras than
    such positions, the loader also moves the train views there to test.
    """
    path = Path(path)
    train, test = list(bundle.train_cameras), list(bundle.test_cameras)
    order = []
    while train or test:
        if len(order) % 8 == 0 and test:
            order.append(test.pop(0))
        elif train:
            order.append(train.pop(0))
        else:
            raise ValueError("too many test cameras to interleave every 8th position")
    intr, recs = {}, {}
    for i, cam in enumerate(order):
        name = f"{i:04d}.png"
        intr[i + 1] = Intrinsics(i + 1, "PINHOLE", cam.width, cam.height,
                                 np.array([cam.fx, cam.fy, cam.cx, cam.cy]))
        x, y, z, w = Rotation.from_matrix(cam.R).as_quat()
        recs[i + 1] = ImageRecord(i + 1, np.array([w, x, y, z]), cam.t.copy(), i + 1, name)
        if cam.image is not None:
            save_image(path / "images" / name, cam.image)
        if cam.mask is not None:
            save_mask(path / "masks" / name, cam.mask)
    write_colmap(path / "sparse" / "0", intr, recs, bundle.points, bundle.colors, binary)
    return path
