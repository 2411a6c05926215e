"""Training objective and image-quality metrics."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def patch_weights(p: int) -> np.ndarray:
    """``exp(-dist to patch center)`` for every pixel of a ``p x p`` patch."""
    c = p // 2
    jj, ii = np.mgrid[0:p, 0:p]
    return np.exp(-np.sqrt((ii - c) ** 2 + (jj - c) ** 2))


def _check_pair(pred, gt):
    if tuple(pred.shape) != tuple(np.shape(gt)):
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {np.shape(gt)} differ")
    if len(pred.shape) < 3 or pred.shape[-1] != 3 or pred.shape[-2] != pred.shape[-3]:
        raise ShapeError(f"expected [..., p, p, 3] patches, got {tuple(pred.shape)}")


def weighted_mse(pred, gt, weighted: bool = True) -> Tensor:
    """Center-weighted squared error of ``[..., p, p, 3]`` patches, averaged over the batch.

    ``(1/p^2) * sum_ij w_ij * ||pred_ij - gt_ij||^2``; with ``weighted=False``
    every ``w_ij`` is 1.
    """
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    p = pred.shape[-2]
    diff = pred - gt
    sq = (diff * diff).sum(axis=-1)
    if weighted:
        sq = sq * patch_weights(p)
    per_patch = sq.sum(axis=(-2, -1)) / (p * p)
    return per_patch.mean()


def ssim_patch(pred, gt) -> Tensor:
    """Differentiable SSIM with a single window covering each whole patch.

    Statistics are per channel; the result is averaged over channels and then
    over the batch.
    """
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    axes = (-3, -2)
    mu_x = pred.mean(axis=axes, keepdims=True)
    mu_y = gt.mean(axis=axes, keepdims=True)
    dx = pred - mu_x
    dy = gt - mu_y
    var_x = (dx * dx).mean(axis=axes)
    var_y = (dy * dy).mean(axis=axes)
    cov = (dx * dy).mean(axis=axes)
    mu_x = mu_x.reshape(var_x.shape)
    mu_y = mu_y.reshape(var_y.shape)
    num = (2.0 * (mu_x * mu_y) + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return (num / den).mean()


def total_loss(
    pred,
    gt,
    use_ssim: bool = True,
    weighted: bool = True,
    ssim_weight: float = 1.0,
) -> Tensor:
    """Patch objective: weighted MSE plus ``1 - SSIM``."""
    loss = weighted_mse(pred, gt, weighted=weighted)
    if use_ssim:
        loss = loss + ssim_weight * (1.0 - ssim_patch(pred, gt))
    return loss


def ssim(a, b, window: int | None = 8) -> float:
    """Mean SSIM over channels and every valid ``window x window`` position.

    ``window=None``, or an image smaller than the window, uses one window
    spanning the whole input.  Inputs are ``[H, W]`` or ``[H, W, C]``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare images of shape {a.shape} and {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if window is None or window > h or window > w:
        wa, wb = a[None, None], b[None, None]
    else:
        # [rows, cols, C, window, window] -> [rows, cols, window, window, C]
        wa = np.moveaxis(sliding_window_view(a, (window, window), axis=(0, 1)), 2, -1)
        wb = np.moveaxis(sliding_window_view(b, (window, window), axis=(0, 1)), 2, -1)
    axes = (2, 3)
    mu_a = wa.mean(axis=axes, keepdims=True)
    mu_b = wb.mean(axis=axes, keepdims=True)
    da, db = wa - mu_a, wb - mu_b
    var_a = (da * da).mean(axis=axes)
    var_b = (db * db).mean(axis=axes)
    cov = (da * db).mean(axis=axes)
    mu_a, mu_b = mu_a[:, :, 0, 0], mu_b[:, :, 0, 0]
    num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare images of shape {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)
