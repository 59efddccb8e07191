"""Image fidelity metrics."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / mse)`` for images in [0, 1]; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ LUMA


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    # separable correlation keeping only windows fully inside the image
    rows = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(rows, k.size, axis=1) @ k


def ssim(a, b, size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, on luma."""
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if min(a.shape) < size:
        raise ValueError(f"image {a.shape} smaller than the {size}x{size} window")
    k = gaussian_window(size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a ** 2
    sbb = _filter_valid(b * b, k) - mu_b ** 2
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
