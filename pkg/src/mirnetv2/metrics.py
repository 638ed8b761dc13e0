"""PSNR, SSIM and MAE on image tensors or arrays."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .tensor import ShapeError, Tensor

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])
# ITU-R BT.601 studio-swing Y for inputs in [0,1], output in [0,1]
_YCBCR_Y = np.array([65.481, 128.553, 24.966]) / 255.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rgb_to_y(x: np.ndarray) -> np.ndarray:
    """[..., 3, H, W] RGB in [0,1] -> [..., 1, H, W] Y of YCbCr in [0,1]."""
    return (16.0 / 255.0 + np.tensordot(_YCBCR_Y, x, axes=([0], [-3])))[..., None, :, :]


def psnr(a, b, peak: float = 1.0, y_channel: bool = False) -> float:
    """10 log10(peak^2 / MSE) over all elements; ``inf`` when MSE is 0."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    if y_channel:
        a, b = rgb_to_y(a), rgb_to_y(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def to_gray(x: np.ndarray) -> np.ndarray:
    """Reduce to a stack of 2-D planes: RGB uses BT.601 luma, 1-channel passes through."""
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W], [C,H,W] or [H,W], got {x.shape}")
    if x.shape[1] == 3:
        return np.tensordot(_LUMA, x, axes=([0], [1]))
    if x.shape[1] == 1:
        return x[:, 0]
    raise ShapeError(f"SSIM needs 1 or 3 channels, got {x.shape[1]}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over all valid (fully inside) window positions."""
    a, b = _pair(a, b)
    ga, gb = to_gray(a), to_gray(b)
    h, w = ga.shape[-2:]
    if h < window or w < window:
        raise ShapeError(f"image {h}x{w} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    half = window // 2
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=-1, mode="constant")
        y = ndimage.correlate1d(y, g, axis=-2, mode="constant")
        return y[..., half : h - half, half : w - half]

    mu_a, mu_b = filt(ga), filt(gb)
    saa = filt(ga * ga) - mu_a * mu_a
    sbb = filt(gb * gb) - mu_b * mu_b
    sab = filt(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
