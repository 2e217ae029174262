"""Model containers, activations and camera geometry."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

SH_REST_COEFFS = 15
SH_C0 = 0.28209479177387814


class OpacityMode(str, enum.Enum):
    SIGMOID = "sigmoid"
    HIGH_OPACITY_ABS = "abs"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


def activate_opacity(raw, mode: OpacityMode = OpacityMode.SIGMOID):
    """Map raw opacity parameters to blending opacities.

    ``SIGMOID`` keeps opacities in (0, 1). ``HIGH_OPACITY_ABS`` uses ``|raw|``,
    which may exceed 1; the rasterizer caps the resulting alpha.
    """
    mode = OpacityMode(mode)
    if mode is OpacityMode.SIGMOID:
        return sigmoid(raw)
    return np.abs(np.asarray(raw, dtype=np.float64))


def opacity_derivative(raw, mode: OpacityMode):
    mode = OpacityMode(mode)
    raw = np.asarray(raw, dtype=np.float64)
    if mode is OpacityMode.SIGMOID:
        s = sigmoid(raw)
        return s * (1.0 - s)
    return np.sign(raw)


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotation(q):
    """Rotation matrices from (w, x, y, z) quaternions, normalized first."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_to_rotation_vjp(q, dR):
    """Pull a gradient on R back to the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # through q / |q|
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def build_covariance(rotation, scales):
    """Covariance ``R S S^T R^T`` for quaternion(s) and activated scale(s)."""
    R = quaternion_to_rotation(rotation)
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian model.

    Rotations are (w, x, y, z) quaternions, scales live in log space and
    ``sh_rest`` holds bands 1-3 as ``(count, 15, 3)``.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    raw_opacities: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray
    opacity_mode: OpacityMode = OpacityMode.SIGMOID

    PARAMS = ("positions", "rotations", "log_scales", "raw_opacities", "sh_dc", "sh_rest")

    def __post_init__(self):
        self.opacity_mode = OpacityMode(self.opacity_mode)
        n = len(self.positions)
        for name in self.PARAMS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
            setattr(self, name, arr)
        self.positions = self.positions.reshape(n, 3)
        self.rotations = self.rotations.reshape(n, 4)
        self.log_scales = self.log_scales.reshape(n, 3)
        self.raw_opacities = self.raw_opacities.reshape(n)
        self.sh_dc = self.sh_dc.reshape(n, 3)
        self.sh_rest = self.sh_rest.reshape(n, SH_REST_COEFFS, 3)

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self):
        return self.count

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros((0, SH_REST_COEFFS, 3)))

    @classmethod
    def from_points(cls, points, colors, initial_opacity: float = 0.1,
                    log_scales=None) -> "GaussianSet":
        """Initialize from a point cloud: identity rotations, flat SH color.

        Without explicit ``log_scales`` each point gets the log of the RMS
        distance to its three nearest neighbours.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        if log_scales is None:
            log_scales = np.repeat(np.log(nearest_neighbor_scale(points))[:, None], 3, axis=1)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(points.copy(), rotations, log_scales,
                   np.full(n, float(inverse_sigmoid(initial_opacity))),
                   rgb_to_sh(np.asarray(colors, dtype=np.float64).reshape(n, 3)),
                   np.zeros((n, SH_REST_COEFFS, 3)))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return activate_opacity(self.raw_opacities, self.opacity_mode)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.scales())

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, n).copy() for n in self.PARAMS), self.opacity_mode)

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(*(getattr(self, n)[index] for n in self.PARAMS), self.opacity_mode)

    def extend(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(*(np.concatenate([getattr(self, n), getattr(other, n)])
                             for n in self.PARAMS), self.opacity_mode)

    def allclose(self, other: "GaussianSet", **kw) -> bool:
        return (self.count == other.count and self.opacity_mode == other.opacity_mode
                and all(np.allclose(getattr(self, n), getattr(other, n), **kw) for n in self.PARAMS))


def nearest_neighbor_scale(points, k: int = 3, floor: float = 1e-7):
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.full(n, 0.01)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    mean_sq = np.mean(dist[:, 1:] ** 2, axis=1)
    return np.sqrt(np.maximum(mean_sq, floor))


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    Pixel ``(x, y)`` is sampled at its center ``(x + 0.5, y + 0.5)``.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    name: str = ""
    image_path: Optional[Path] = None
    image: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, width, height, fov_x_deg=60.0, up=(0.0, 0.0, 1.0), **kw):
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, R, -R @ eye, **kw)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def tan_fov_x(self) -> float:
        return 0.5 * self.width / self.fx

    @property
    def tan_fov_y(self) -> float:
        return 0.5 * self.height / self.fy

    def world_to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def without_image(self) -> "Camera":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(image=None, mask=None)
        return Camera(**kw)
