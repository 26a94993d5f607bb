"""Degradation synthesis: bicubic resampling, Gaussian blur, calibrated noise.

All functions take and return :class:`Tensor` images shaped (N, C, H, W)
with intensities in [0, 1]. Nothing here is differentiable; these build
training and test data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor_core import ShapeError, Tensor

PEAK = 1.0
SUPPORTED_SCALES = (2, 4)
BLUR_SIZES = (7, 9, 11)


def default_sigma(size: int) -> float:
    """Blur width used when a spec leaves sigma out: 7 -> 1.5, 9 -> 2.0, 11 -> 2.5."""
    return (size - 1) / 4.0


@dataclass(frozen=True)
class BicubicDown:
    scale: int

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ValueError(f"BicubicDown scale must be one of {SUPPORTED_SCALES}, got {self.scale}")

    @property
    def label(self) -> str:
        return f"bicubic_down{self.scale}"


@dataclass(frozen=True)
class BicubicUp:
    scale: int

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ValueError(f"BicubicUp scale must be one of {SUPPORTED_SCALES}, got {self.scale}")

    @property
    def label(self) -> str:
        return f"bicubic_up{self.scale}"


@dataclass(frozen=True)
class Blur:
    size: int
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.size not in BLUR_SIZES:
            raise ValueError(f"Blur size must be one of {BLUR_SIZES}, got {self.size}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", default_sigma(self.size))
        if not self.sigma > 0:
            raise ValueError(f"Blur sigma must be positive, got {self.sigma}")

    @property
    def label(self) -> str:
        if self.sigma == default_sigma(self.size):
            return f"blur{self.size}"
        return f"blur{self.size}s{self.sigma:g}"


@dataclass(frozen=True)
class Noise:
    target_psnr_db: float
    seed: int = 0

    @property
    def label(self) -> str:
        return f"noise{self.target_psnr_db:g}dB"


Step = Union[BicubicDown, BicubicUp, Blur, Noise]


@dataclass(frozen=True)
class DegradationSpec:
    """Ordered list of degradation steps applied to a ground-truth image."""

    steps: Tuple[Step, ...] = ()

    def __init__(self, steps: Sequence[Step] = ()):
        object.__setattr__(self, "steps", tuple(steps))
        for s in self.steps:
            if not isinstance(s, (BicubicDown, BicubicUp, Blur, Noise)):
                raise TypeError(f"not a degradation step: {s!r}")

    @property
    def net_scale(self) -> Fraction:
        """Output size over input size (e.g. 1/4 for a single BicubicDown(4))."""
        f = Fraction(1)
        for s in self.steps:
            if isinstance(s, BicubicDown):
                f /= s.scale
            elif isinstance(s, BicubicUp):
                f *= s.scale
        return f

    @property
    def label(self) -> str:
        return "+".join(s.label for s in self.steps) or "identity"

    def __add__(self, other: "DegradationSpec") -> "DegradationSpec":
        return DegradationSpec(self.steps + other.steps)


# --------------------------------------------------------------------------
# bicubic


def bicubic_weight(x: float, a: float = -0.5) -> float:
    """Keys cubic convolution kernel."""
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def _keys(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int, scale: float, antialias: bool = True, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) matrix of 1-D bicubic weights with clamped borders."""
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    lo = np.floor(centers - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = _keys((centers[:, None] - idx) / stretch, a)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return m


def resample_bicubic(image: Tensor, scale: float, antialias: bool = True) -> Tensor:
    """Separable bicubic resize by ``scale`` (rows, then columns), clipped to [0, 1]."""
    x = image.data
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"resample_bicubic needs a non-empty (N,C,H,W) image, got {x.shape}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = x.shape[2], x.shape[3]
    ho, wo = int(round(h * scale)), int(round(w * scale))
    if ho < 1 or wo < 1:
        raise ShapeError(f"resampling {h}x{w} by {scale} leaves no pixels")
    if scale == 1:
        return Tensor(x.copy())
    my = resample_matrix(h, ho, scale, antialias)
    mx = resample_matrix(w, wo, scale, antialias)
    out = np.einsum("ih,nchw->nciw", my, x.astype(np.float64))
    out = np.einsum("jw,nciw->ncij", mx, out)
    return Tensor(np.clip(out, 0.0, PEAK).astype(x.dtype))


# --------------------------------------------------------------------------
# blur and noise


def blur_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian sampled at integer offsets, normalized to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"blur kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def blur(image: Tensor, kernel: np.ndarray) -> Tensor:
    """Per-channel 2-D correlation with clamp-replicate borders."""
    x = image.data
    if x.ndim != 4:
        raise ShapeError(f"blur needs an (N,C,H,W) image, got {x.shape}")
    k = np.asarray(kernel, dtype=np.float64)
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"blur kernel extents must be odd, got {k.shape}")
    ph, pw = kh // 2, kw // 2
    h, w = x.shape[2], x.shape[3]
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="edge")
    out = np.zeros(x.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += k[i, j] * xp[:, :, i:i + h, j:j + w]
    return Tensor(out.astype(x.dtype))


def noise_sigma(target_psnr_db: float, peak: float = PEAK) -> float:
    return peak * 10.0 ** (-target_psnr_db / 20.0)


def add_noise(image: Tensor, target_psnr_db: float, seed: int, index: int = 0) -> Tensor:
    """Additive Gaussian noise calibrated to ``target_psnr_db`` against the clean image.

    ``index`` is mixed into the seed so a dataset gets independent noise per
    image while staying reproducible.
    """
    x = image.data
    rng = np.random.default_rng([int(seed), int(index)])
    n = rng.standard_normal(x.shape) * noise_sigma(target_psnr_db)
    return Tensor(np.clip(x + n, 0.0, PEAK).astype(x.dtype))


def apply(spec: DegradationSpec, image: Tensor, index: int = 0) -> Tensor:
    """Run each step of ``spec`` over ``image`` in order."""
    out = image
    for step in spec.steps:
        if isinstance(step, BicubicDown):
            out = resample_bicubic(out, 1.0 / step.scale, antialias=True)
        elif isinstance(step, BicubicUp):
            out = resample_bicubic(out, float(step.scale), antialias=True)
        elif isinstance(step, Blur):
            out = blur(out, blur_kernel(step.size, step.sigma))
        elif isinstance(step, Noise):
            out = add_noise(out, step.target_psnr_db, step.seed, index)
    return out if out is not image else Tensor(image.data.copy())
