"""Real spherical harmonics up to degree 3 for view-dependent color.

The basis ordering and signs follow the usual splatting convention:
``sqrt(2) Im(Y_l^|m|)`` for ``m < 0``, ``Y_l^0`` and ``sqrt(2) Re(Y_l^m)`` for
``m > 0``, with the Condon-Shortley phase included in ``Y_l^m``.
"""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs, degree: int = MAX_DEGREE) -> np.ndarray:
    """Basis values ``(..., 16)`` at unit directions; bands above ``degree`` are 0."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.zeros(dirs.shape[:-1] + (16,))
    out[..., 0] = C0
    if degree >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2 * zz - xx - yy)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = C3[0] * y * (3 * xx - yy)
        out[..., 10] = C3[1] * x * y * z
        out[..., 11] = C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs, degree: int = MAX_DEGREE) -> np.ndarray:
    """Derivatives ``(..., 16, 3)`` of each basis polynomial w.r.t. (x, y, z)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    J = np.zeros(dirs.shape[:-1] + (16, 3))
    if degree >= 1:
        J[..., 1, 1] = -C1
        J[..., 2, 2] = C1
        J[..., 3, 0] = -C1
    if degree >= 2:
        J[..., 4, 0] = C2[0] * y
        J[..., 4, 1] = C2[0] * x
        J[..., 5, 1] = C2[1] * z
        J[..., 5, 2] = C2[1] * y
        J[..., 6, 0] = -2 * C2[2] * x
        J[..., 6, 1] = -2 * C2[2] * y
        J[..., 6, 2] = 4 * C2[2] * z
        J[..., 7, 0] = C2[3] * z
        J[..., 7, 2] = C2[3] * x
        J[..., 8, 0] = 2 * C2[4] * x
        J[..., 8, 1] = -2 * C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        J[..., 9, 0] = 6 * C3[0] * x * y
        J[..., 9, 1] = 3 * C3[0] * (xx - yy)
        J[..., 10, 0] = C3[1] * y * z
        J[..., 10, 1] = C3[1] * x * z
        J[..., 10, 2] = C3[1] * x * y
        J[..., 11, 0] = -2 * C3[2] * x * y
        J[..., 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
        J[..., 11, 2] = 8 * C3[2] * y * z
        J[..., 12, 0] = -6 * C3[3] * x * z
        J[..., 12, 1] = -6 * C3[3] * y * z
        J[..., 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
        J[..., 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
        J[..., 13, 1] = -2 * C3[4] * x * y
        J[..., 13, 2] = 8 * C3[4] * x * z
        J[..., 14, 0] = 2 * C3[5] * x * z
        J[..., 14, 1] = -2 * C3[5] * y * z
        J[..., 14, 2] = C3[5] * (xx - yy)
        J[..., 15, 0] = 3 * C3[6] * (xx - yy)
        J[..., 15, 1] = -6 * C3[6] * x * y
    return J


def _stack_coeffs(sh_dc, sh_rest):
    sh_dc = np.asarray(sh_dc, dtype=np.float64)
    sh_rest = np.asarray(sh_rest, dtype=np.float64)
    return np.concatenate([sh_dc[..., None, :], sh_rest.reshape(sh_dc.shape[:-1] + (15, 3))], axis=-2)


def eval_sh_unclamped(dirs, sh_dc, sh_rest, degree: int = MAX_DEGREE) -> np.ndarray:
    """Linear part of the color: basis contracted with coefficients plus 0.5."""
    basis = sh_basis(dirs, degree)
    coeffs = _stack_coeffs(sh_dc, sh_rest)
    return np.einsum("...k,...kc->...c", basis, coeffs) + 0.5


def eval_sh(dirs, sh_dc, sh_rest, degree: int = MAX_DEGREE) -> np.ndarray:
    """RGB color seen from unit direction(s), clamped at 0 from below."""
    return np.maximum(eval_sh_unclamped(dirs, sh_dc, sh_rest, degree), 0.0)


def eval_sh_vjp(dirs, sh_dc, sh_rest, d_rgb, degree: int = MAX_DEGREE):
    """Gradients of a scalar loss w.r.t. ``sh_dc``, ``sh_rest`` and ``dirs``.

    ``d_rgb`` is the loss gradient on the clamped color; entries whose
    unclamped value is not positive pass no gradient.
    """
    raw = eval_sh_unclamped(dirs, sh_dc, sh_rest, degree)
    g = np.where(raw > 0.0, d_rgb, 0.0)
    basis = sh_basis(dirs, degree)
    d_coeffs = basis[..., :, None] * g[..., None, :]
    coeffs = _stack_coeffs(sh_dc, sh_rest)
    jac = sh_basis_jacobian(dirs, degree)
    # d/ddir sum_k sum_c basis_k(d) coeff_kc g_c
    weights = np.einsum("...kc,...c->...k", coeffs, g)
    d_dirs = np.einsum("...k,...kj->...j", weights, jac)
    return d_coeffs[..., 0, :], d_coeffs[..., 1:, :], d_dirs
