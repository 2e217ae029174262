"""Photometric losses with analytic image gradients, saliency maps and metrics.

Images are float arrays shaped ``(H, W, 3)`` in [0, 1].
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_SSIM_WEIGHT = 0.2
LUMA = np.array([0.299, 0.587, 0.114])


def _check(render, gt):
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch: {render.shape} vs {gt.shape}")
    return render, gt


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def l1_loss(render, gt):
    """Mean absolute error and its gradient ``sign(render - gt) / numel``."""
    render, gt = _check(render, gt)
    diff = render - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _blur(x, w):
    # separable window, replicate border, over the two spatial axes
    return ndimage.correlate1d(ndimage.correlate1d(x, w, axis=0, mode="nearest"), w, axis=1, mode="nearest")


def _blur_adjoint_1d(x, w, axis):
    r = len(w) // 2
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    z = ndimage.correlate1d(np.pad(x, pad), w[::-1], axis=axis, mode="constant")
    out = np.take(z, np.arange(r, r + n), axis=axis)
    head = np.take(z, np.arange(0, r), axis=axis).sum(axis=axis)
    tail = np.take(z, np.arange(r + n, n + 2 * r), axis=axis).sum(axis=axis)
    idx = [slice(None)] * x.ndim
    idx[axis] = 0
    out[tuple(idx)] += head
    idx[axis] = n - 1
    out[tuple(idx)] += tail
    return out


def _blur_adjoint(x, w):
    return _blur_adjoint_1d(_blur_adjoint_1d(x, w, 1), w, 0)


def ssim(render, gt, with_grad: bool = True):
    """Mean SSIM over pixels and channels with an 11x11 Gaussian window.

    The window is applied as two 1D passes with replicate borders; the map,
    its mean and the gradient factors are computed together. Returns
    ``(value, d value / d render)``; the gradient is ``None`` when not asked.
    """
    x, y = _check(render, gt)
    w = gaussian_window()
    mx, my = _blur(x, w), _blur(y, w)
    exx, eyy, exy = _blur(x * x, w), _blur(y * y, w), _blur(x * y, w)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    value = float(np.mean((a1 * a2) / (b1 * b2)))
    if not with_grad:
        return value, None
    n = x.size
    den = b1 * b2
    # partials of the map w.r.t. the blurred statistics
    f_mx = (2 * my * a2 * den - a1 * a2 * 2 * mx * b2) / den ** 2
    f_sxx = -(a1 * a2) / (b1 * b2 * b2)
    f_sxy = 2 * a1 / den
    g_mean = f_mx - 2 * mx * f_sxx - my * f_sxy
    grad = (_blur_adjoint(g_mean, w) + 2 * x * _blur_adjoint(f_sxx, w) + y * _blur_adjoint(f_sxy, w)) / n
    return value, grad


def photometric_loss(render, gt, ssim_weight: float = DEFAULT_SSIM_WEIGHT):
    """``(1 - w) L1 + w (1 - SSIM)`` and its gradient."""
    l1, g1 = l1_loss(render, gt)
    if ssim_weight == 0.0:
        return l1, g1
    s, gs = ssim(render, gt)
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - s), (1.0 - ssim_weight) * g1 - ssim_weight * gs


def luminance(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def laplacian_magnitude(gt) -> np.ndarray:
    """``|4-neighbour Laplacian|`` of the luminance, replicate border."""
    return np.abs(ndimage.laplace(luminance(gt), mode="nearest"))


def saliency(gt, render, roi_mask=None, lambda1: float = 0.5, lambda2: float = 0.5) -> np.ndarray:
    """Per-pixel importance from photometric error and image detail.

    ``mask * (lambda1 * mean_c |render - gt| + lambda2 * |Laplacian(luma(gt))|)``.
    """
    render, gt = _check(render, gt)
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("saliency weights must be non-negative")
    sal = lambda1 * np.mean(np.abs(render - gt), axis=-1) + lambda2 * laplacian_magnitude(gt)
    if roi_mask is not None:
        roi_mask = np.asarray(roi_mask)
        if roi_mask.shape != sal.shape:
            raise ValueError(f"ROI mask shape {roi_mask.shape} does not match image {sal.shape}")
        sal = np.where(roi_mask > 0, sal, 0.0)
    return sal


def psnr(render, gt) -> float:
    """PSNR in dB for unit peak; ``inf`` for identical images."""
    render, gt = _check(render, gt)
    mse = float(np.mean((render - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
