"""PSNR, SSIM and the high-frequency-proportion difference (HFIV)."""
from __future__ import annotations

import numpy as np
from scipy.signal import correlate2d

from . import wavelet
from .tensor import ShapeError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap=PSNR_CAP):
    """10 log10(1 / MSE) for images in [0, 1]; identical images give ``cap``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1)
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    return img


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, k1=0.01, k2=0.03, size=11, sigma=1.5, data_range=1.0):
    """Mean local SSIM of the grayscale images over all full windows."""
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if min(a.shape) < size:
        raise ShapeError(f"image {a.shape} smaller than the {size}x{size} window")
    win = gaussian_window(size, sigma)

    def filt(x):
        return correlate2d(x, win, mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def hf_proportion(img):
    """Share of wavelet energy in the high-frequency subbands (0 for a zero image)."""
    p = wavelet.decompose(np.asarray(img, dtype=np.float64))
    total = p.energy()
    if total == 0:
        return 0.0
    return float(p.high_energy() / total)


def hfiv(gt, rendered):
    """Absolute difference of high-frequency proportions."""
    gt, rendered = _pair(gt, rendered)
    return abs(hf_proportion(gt) - hf_proportion(rendered))


def evaluate(gt, rendered):
    return {"psnr": psnr(gt, rendered), "ssim": ssim(gt, rendered), "hfiv": hfiv(gt, rendered)}
