"""Perspective projection of 3D Gaussians to screen-space splats."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianSet, opacity_derivative, quaternion_to_rotation, quaternion_to_rotation_vjp
from .sh import MAX_DEGREE, eval_sh, eval_sh_vjp

LOW_PASS = 0.3
FRUSTUM_SLACK = 1.3


@dataclass
class Splats:
    """Projected, depth-sorted splats for one view (structure of arrays).

    Row ``i`` is the i-th splat in front-to-back order; ``gaussian_index``
    maps it back to the model. The remaining fields cache the intermediates
    the backward chain needs.
    """

    gaussian_index: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    width: int
    height: int
    num_gaussians: int
    sh_degree: int = MAX_DEGREE
    # backward cache
    p_cam: np.ndarray = None
    rotation: np.ndarray = None
    scales: np.ndarray = None
    cov3d: np.ndarray = None
    cov2d: np.ndarray = None
    T: np.ndarray = None
    J: np.ndarray = None
    unclamped_xy: np.ndarray = None
    view_dirs: np.ndarray = None

    def __len__(self):
        return len(self.gaussian_index)

    @classmethod
    def from_arrays(cls, mean2d, conic, rgb, opacity, width, height, depth=None) -> "Splats":
        """Screen-space splats given directly (no 3D model behind them)."""
        mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
        n = len(mean2d)
        conic = np.asarray(conic, dtype=np.float64).reshape(n, 3)
        det = conic[:, 0] * conic[:, 2] - conic[:, 1] ** 2
        cov = np.stack([conic[:, 2], -conic[:, 1], conic[:, 0]], axis=1) / det[:, None]
        mid = 0.5 * (cov[:, 0] + cov[:, 2])
        lam = mid + np.sqrt(np.maximum(mid * mid - (cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2), 0.0))
        depth = np.arange(1, n + 1, dtype=np.float64) if depth is None else np.asarray(depth, dtype=np.float64)
        return cls(np.arange(n), mean2d, conic, depth, 3.0 * np.sqrt(lam),
                   np.asarray(rgb, dtype=np.float64).reshape(n, 3),
                   np.asarray(opacity, dtype=np.float64).reshape(n), width, height, n)


def _bbox_hits_image(mean2d, radius, width, height):
    # pixel centers sit at integer + 0.5
    x0 = np.maximum(np.ceil(mean2d[:, 0] - radius - 0.5), 0)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radius - 0.5), width - 1)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - radius - 0.5), 0)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radius - 0.5), height - 1)
    return (x1 >= x0) & (y1 >= y0)


def project(gaussians: GaussianSet, camera: Camera, sh_degree: int = MAX_DEGREE) -> Splats:
    """Cull, project and depth-sort ``gaussians`` for ``camera``.

    The 2D covariance is ``J W Sigma W^T J^T`` plus a 0.3 px^2 low-pass term;
    splats whose 3-sigma footprint misses every pixel center are dropped.
    Sorting is by camera depth with the Gaussian index as tie-break.
    """
    n = gaussians.count
    p_cam = camera.world_to_camera(gaussians.positions)
    keep = np.nonzero(p_cam[:, 2] > camera.near)[0]
    p = p_cam[keep]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    limx = FRUSTUM_SLACK * camera.tan_fov_x
    limy = FRUSTUM_SLACK * camera.tan_fov_y
    u = np.clip(x / z, -limx, limx)
    v = np.clip(y / z, -limy, limy)
    unclamped = np.stack([np.abs(x / z) < limx, np.abs(y / z) < limy], axis=1)

    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * u / z
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * v / z
    T = J @ camera.R

    rotation = quaternion_to_rotation(gaussians.rotations[keep])
    scales = np.exp(gaussians.log_scales[keep])
    M = rotation * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det > 0.0
    safe_det = np.where(ok, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    mean2d = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)
    ok &= _bbox_hits_image(mean2d, radius, camera.width, camera.height)

    sel = np.nonzero(ok)[0]
    order = sel[np.lexsort((keep[sel], z[sel]))]
    gidx = keep[order]

    view_dirs = gaussians.positions[gidx] - camera.center
    dirs = view_dirs / np.linalg.norm(view_dirs, axis=1, keepdims=True)
    rgb = eval_sh(dirs, gaussians.sh_dc[gidx], gaussians.sh_rest[gidx], sh_degree)
    opacity = gaussians.opacities()[gidx]

    return Splats(
        gaussian_index=gidx, mean2d=mean2d[order], conic=conic[order], depth=z[order],
        radius=radius[order], rgb=rgb, opacity=opacity, width=camera.width,
        height=camera.height, num_gaussians=n, sh_degree=sh_degree,
        p_cam=p[order], rotation=rotation[order], scales=scales[order], cov3d=cov3d[order],
        cov2d=cov2d[order], T=T[order], J=J[order], unclamped_xy=unclamped[order],
        view_dirs=view_dirs,
    )


def project_vjp(splats: Splats, gaussians: GaussianSet, camera: Camera,
                d_mean2d, d_conic, d_opacity, d_rgb) -> dict:
    """Chain screen-space splat gradients back to the model parameters.

    Returns a dict of full-size gradient arrays keyed like the
    ``GaussianSet`` fields; Gaussians without a splat get exact zeros.
    """
    n = gaussians.count
    g = splats.gaussian_index
    out = {
        "positions": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "raw_opacities": np.zeros(n),
        "sh_dc": np.zeros((n, 3)),
        "sh_rest": np.zeros((n, 15, 3)),
    }
    if len(g) == 0:
        return out

    # conic = inverse(cov2d); symmetric off-diagonal counted once in d_conic
    Q = np.empty((len(g), 2, 2))
    Q[:, 0, 0] = splats.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = splats.conic[:, 1]
    Q[:, 1, 1] = splats.conic[:, 2]
    GQ = np.empty_like(Q)
    GQ[:, 0, 0] = d_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * d_conic[:, 1]
    GQ[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -Q @ GQ @ Q

    T = splats.T
    d_cov3d = np.swapaxes(T, 1, 2) @ d_cov2d @ T
    d_T = 2.0 * d_cov2d @ T @ splats.cov3d
    d_J = d_T @ camera.R.T

    x, y, z = splats.p_cam[:, 0], splats.p_cam[:, 1], splats.p_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    ux, uy = splats.unclamped_xy[:, 0], splats.unclamped_xy[:, 1]
    u = -splats.J[:, 0, 2] * z / fx
    v = -splats.J[:, 1, 2] * z / fy
    d_pcam = np.zeros((len(g), 3))
    # mean2d = f * xy / z + c
    d_pcam[:, 0] += d_mean2d[:, 0] * fx / z
    d_pcam[:, 1] += d_mean2d[:, 1] * fy / z
    d_pcam[:, 2] -= (d_mean2d[:, 0] * fx * x + d_mean2d[:, 1] * fy * y) / (z * z)
    # J00 = fx/z, J11 = fy/z
    d_pcam[:, 2] -= (d_J[:, 0, 0] * fx + d_J[:, 1, 1] * fy) / (z * z)
    # J02 = -fx u / z with u = clamp(x / z)
    d_pcam[:, 0] += np.where(ux, -d_J[:, 0, 2] * fx / (z * z), 0.0)
    d_pcam[:, 2] += d_J[:, 0, 2] * fx * u / (z * z) + np.where(ux, d_J[:, 0, 2] * fx * x / z ** 3, 0.0)
    d_pcam[:, 1] += np.where(uy, -d_J[:, 1, 2] * fy / (z * z), 0.0)
    d_pcam[:, 2] += d_J[:, 1, 2] * fy * v / (z * z) + np.where(uy, d_J[:, 1, 2] * fy * y / z ** 3, 0.0)

    d_pos = d_pcam @ camera.R

    # cov3d = M M^T, M = R diag(s)
    R, s = splats.rotation, splats.scales
    d_M = 2.0 * d_cov3d @ (R * s[:, None, :])
    d_R = d_M * s[:, None, :]
    d_s = np.sum(d_M * R, axis=1)
    out["log_scales"][g] = d_s * s
    out["rotations"][g] = quaternion_to_rotation_vjp(gaussians.rotations[g], d_R)

    vdir = splats.view_dirs
    norm = np.linalg.norm(vdir, axis=1, keepdims=True)
    dirs = vdir / norm
    d_dc, d_rest, d_dirs = eval_sh_vjp(dirs, gaussians.sh_dc[g], gaussians.sh_rest[g], d_rgb, splats.sh_degree)
    d_pos += (d_dirs - dirs * np.sum(dirs * d_dirs, axis=1, keepdims=True)) / norm
    out["positions"][g] = d_pos
    out["sh_dc"][g] = d_dc
    out["sh_rest"][g] = d_rest
    out["raw_opacities"][g] = d_opacity * opacity_derivative(gaussians.raw_opacities[g], gaussians.opacity_mode)
    return out
