"""RGB <-> YCbCr (BT.601) conversion and luma-only reconstruction.

Images are float arrays in ``[0, 1]`` with channels on the last axis.
"""

from __future__ import annotations

from typing import Iterable, Tuple

import numpy as np

_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB

# full range: Y in [0, 1], chroma centred on 0.5 with the same excursion
_FULL = np.array([
    [_KR, _KG, _KB],
    [-0.5 * _KR / (1 - _KB), -0.5 * _KG / (1 - _KB), 0.5],
    [0.5, -0.5 * _KG / (1 - _KR), -0.5 * _KB / (1 - _KR)],
])
_FULL_OFFSET = np.array([0.0, 0.5, 0.5])

# studio range: Y in [16, 235] / 255, chroma in [16, 240] / 255
_STUDIO = _FULL * np.array([[219.0], [224.0], [224.0]]) / 255.0
_STUDIO_OFFSET = np.array([16.0, 128.0, 128.0]) / 255.0

STANDARDS = {
    "bt601_full": (_FULL, _FULL_OFFSET),
    "bt601_studio": (_STUDIO, _STUDIO_OFFSET),
}


def _matrix(standard):
    try:
        return STANDARDS[standard]
    except KeyError:
        raise ValueError(f"unknown YCbCr standard {standard!r}, expected one of {sorted(STANDARDS)}") from None


def _check3(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 1 or img.shape[-1] != 3:
        raise ValueError(f"expected 3 channels on the last axis, got shape {img.shape}")
    return img


def rgb_to_ycbcr(img, standard: str = "bt601_full") -> np.ndarray:
    m, off = _matrix(standard)
    return _check3(img) @ m.T + off


def ycbcr_to_rgb(img, standard: str = "bt601_full") -> np.ndarray:
    m, off = _matrix(standard)
    rgb = (_check3(img) - off) @ np.linalg.inv(m).T
    return np.clip(rgb, 0.0, 1.0)


def luma(img, standard: str = "bt601_full") -> np.ndarray:
    """Y channel of an RGB image, shape ``(..., H, W)``."""
    return rgb_to_ycbcr(img, standard)[..., 0]


def reconstruct(y_pred, blurry_rgb, standard: str = "bt601_full") -> np.ndarray:
    """Combine a predicted Y channel with the chroma of the blurry input."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_pred.ndim == np.ndim(blurry_rgb) and y_pred.shape[-1] == 1:
        y_pred = y_pred[..., 0]
    ycc = rgb_to_ycbcr(blurry_rgb, standard)
    if y_pred.shape != ycc.shape[:-1]:
        raise ValueError(f"luma shape {y_pred.shape} does not match image shape {ycc.shape[:-1]}")
    ycc[..., 0] = y_pred
    return ycbcr_to_rgb(ycc, standard)


def oracle_bounds(pairs: Iterable[Tuple[np.ndarray, np.ndarray]], standard: str = "bt601_full"):
    """Mean PSNR of the blurry inputs and of the ground-truth-luma oracle.

    ``pairs`` yields ``(blurry, sharp)`` RGB images. Returns
    ``(input_psnr, y_oracle_psnr)`` in dB.
    """
    from .metrics import psnr

    inp, orc = [], []
    for blurry, sharp in pairs:
        inp.append(psnr(blurry, sharp))
        orc.append(psnr(reconstruct(luma(sharp, standard), blurry, standard), sharp))
    if not inp:
        raise ValueError("oracle_bounds needs at least one (blurry, sharp) pair")
    return float(np.mean(inp)), float(np.mean(orc))
