"""PSNR and multi-scale SSIM on float images in ``[0, 1]``."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0

MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give ``PSNR_CAP``."""
    pred, gt = _pair(pred, gt)
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse)))


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable filtering, then keep positions where the window fits entirely
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_terms(x, y, g, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(lum.mean()), float(cs.mean())


def _halve(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def min_mssim_size(scales: int = len(MSSSIM_WEIGHTS)) -> int:
    return WINDOW_SIZE * 2 ** (scales - 1)


def mssim_channel(x, y, data_range: float = 1.0, weights=MSSSIM_WEIGHTS) -> float:
    """MS-SSIM of one 2-D channel.

    Contrast-structure terms are taken at every scale and the luminance term
    only at the coarsest; negative factors are clipped to zero so the score
    stays in ``[0, 1]``.
    """
    g = gaussian_window()
    n = len(weights)
    if min(x.shape) < min_mssim_size(n):
        raise ValueError(f"image {x.shape} too small for {n} scales; need >= {min_mssim_size(n)} per side")
    score = 1.0
    for j, wj in enumerate(weights):
        lum, cs = _ssim_terms(x, y, g, data_range)
        if j == n - 1:
            score *= max(lum * cs, 0.0) ** wj
        else:
            score *= max(cs, 0.0) ** wj
            x, y = _halve(x), _halve(y)
    return float(score)


def mssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean MS-SSIM over channels of ``(H, W)`` or ``(H, W, C)`` images."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    vals = [mssim_channel(pred[..., c], gt[..., c], data_range) for c in range(pred.shape[-1])]
    return float(np.mean(vals))
