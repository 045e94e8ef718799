"""Image losses and metrics: L1, SSIM / D-SSIM, PSNR."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = gaussian_kernel()


def _blur_np(x: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(x, _KERNEL, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def blur(x) -> Tensor:
    """Separable 11x11 Gaussian filter with zero padding over (H, W, C).

    The zero-padded filter with a symmetric kernel is self-adjoint, so the
    backward pass is the same blur.
    """
    return ad.record(_blur_np(ad._val(x)), (x,), lambda g: (_blur_np(g),), "blur")


def ssim_map(x, y) -> Tensor:
    """Per-pixel, per-channel SSIM for images in [0, 1] of shape (H, W, C)."""
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = blur(x * x) - mu_xx
    s_yy = blur(y * y) - mu_yy
    s_xy = blur(x * y) - mu_xy
    num = (2.0 * mu_xy + SSIM_C1) * (2.0 * s_xy + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (s_xx + s_yy + SSIM_C2)
    return num / den


def ssim(x, y) -> float:
    """Mean SSIM over the region where the window fits inside the image.

    Images smaller than the window fall back to the zero-padded full map.
    """
    x = np.asarray(ad._val(x), dtype=np.float64)
    y = np.asarray(ad._val(y), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    with ad.no_tape():
        m = ssim_map(x, y).value
    r = SSIM_WINDOW // 2
    if x.shape[0] > 2 * r and x.shape[1] > 2 * r:
        m = m[r:-r, r:-r]
    return float(m.mean())


def l1(x, y) -> Tensor:
    return ad.mean(ad.abs_(x - y))


def loss(rendered, target, lam: float = 0.2) -> Tensor:
    """(1 - lam) * L1 + lam * (1 - SSIM) / 2, SSIM averaged over the padded map."""
    rv, tv = ad._val(rendered), ad._val(target)
    if rv.shape != tv.shape:
        raise ValueError(f"image shapes differ: {rv.shape} vs {tv.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    out = (1.0 - lam) * l1(rendered, target)
    if lam > 0.0:
        d_ssim = (1.0 - ad.mean(ssim_map(rendered, target))) * 0.5
        out = out + lam * d_ssim
    return out


def psnr(rendered, target) -> float:
    x = np.asarray(ad._val(rendered), dtype=np.float64)
    y = np.asarray(ad._val(target), dtype=np.float64)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
