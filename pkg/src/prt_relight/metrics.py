"""Masked PSNR and SSIM on clamped linear images."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate

PSNR_CAP = 99.0
LUMA = np.array([0.2126, 0.7152, 0.0722])


def _joint_mask(a, b, mask_a=None, mask_b=None) -> np.ndarray:
    m = np.ones(a.shape[:2], bool)
    for mk in (mask_a, mask_b):
        if mk is not None:
            m &= np.asarray(mk, dtype=bool)
    return m


def psnr(a: np.ndarray, b: np.ndarray, mask_a=None, mask_b=None) -> float:
    """PSNR in dB over the shared mask, images clamped to [0, 1]; capped at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = _joint_mask(a, b, mask_a, mask_b)
    if not m.any():
        raise ValueError("masks do not overlap")
    x, y = np.clip(a[m], 0, 1), np.clip(b[m], 0, 1)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10 * math.log10(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-0.5 * ((np.arange(size) - size // 2) / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, mask_a=None, mask_b=None, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of Rec. 709 luminance over the shared mask (11x11 Gaussian, sigma 1.5)."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = _joint_mask(a, b, mask_a, mask_b)
    if not m.any():
        raise ValueError("masks do not overlap")
    x = np.clip(a, 0, 1) @ LUMA if a.ndim == 3 else np.clip(a, 0, 1)
    y = np.clip(b, 0, 1) @ LUMA if b.ndim == 3 else np.clip(b, 0, 1)
    w = _gaussian_window()
    blur = lambda im: correlate(im, w, mode="reflect")
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1, c2 = k1 ** 2, k2 ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(np.mean(smap[m]))
