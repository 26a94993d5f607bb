"""PSNR and SSIM over RGB images in [0, peak]."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, Tensor


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"SSIM window_size must be odd, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM constants k1, k2 must be positive")


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def mse(a, b) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB with one MSE over all channels; ``inf`` for identical inputs."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    return psnr_from_mse(mse(a, b), peak)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """1-D normalized Gaussian; the 2-D window is its outer product."""
    d = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(d * d) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # x: (..., H, W); separable valid-mode correlation
    k = g.size
    h, w = x.shape[-2], x.shape[-1]
    rows = sum(g[i] * x[..., i:i + h - k + 1, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:j + w - k + 1] for j in range(k))


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    """SSIM at every fully valid window position, shape (N, C, H-k+1, W-k+1)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    k = params.window_size
    if a.shape[-2] < k or a.shape[-1] < k:
        raise ShapeError(f"image {a.shape[-2]}x{a.shape[-1]} is smaller than the {k}x{k} SSIM window")
    g = gaussian_window(k, params.window_sigma)
    c1 = (params.k1 * params.peak) ** 2
    c2 = (params.k2 * params.peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM, averaged per channel over valid positions then across channels."""
    m = ssim_map(a, b, params)
    return float(m.mean(axis=(0, 2, 3)).mean())
