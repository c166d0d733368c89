"""Kernel and image quality measures."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from ecall.errors import DimensionMismatch, ImageTooSmall, ZeroKernel, ZeroTrueKernel
from ecall.tensor import as_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# returned by psnr() for identical images
PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class KernelScore:
    l2err: float
    mnc: float


@dataclass(frozen=True)
class ImageScore:
    psnr: float
    ssim: float


def _pad_to(k, size):
    p = (size - k.shape[0]) // 2
    return np.pad(k, p) if p else k


def _match_sizes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    size = max(a.shape[0], b.shape[0])
    return _pad_to(a, size), _pad_to(b, size)


def l2err(k_est, k_true):
    """Relative L2 error ``|k_est - k_true| / |k_true|``.

    The smaller kernel is zero-padded centrally to the larger size.
    """
    k_est, k_true = _match_sizes(k_est, k_true)
    norm = np.linalg.norm(k_true)
    if norm == 0:
        raise ZeroTrueKernel("reference kernel is zero")
    return float(np.linalg.norm(k_est - k_true) / norm)


def mnc(k_est, k_true, mode="correlation"):
    """Maximum over all shifts of the normalized cross-correlation.

    ``mode="convolution"`` uses the full convolution instead; both agree for
    kernels symmetric under 180 degree rotation.
    """
    a = np.asarray(k_est, dtype=np.float64)
    b = np.asarray(k_true, dtype=np.float64)
    saa, sbb = np.sum(a * a), np.sum(b * b)
    if saa == 0 or sbb == 0:
        raise ZeroKernel("MNC is undefined for a zero kernel")
    if mode == "correlation":
        full = signal.correlate(a, b, mode="full", method="direct")
    elif mode == "convolution":
        full = signal.convolve(a, b, mode="full", method="direct")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    best = full.max()
    if mode == "correlation" and a.shape == b.shape:
        # aligned term summed like the norms, so mnc(k, k) is exactly 1
        best = max(best, np.sum(a * b))
    return float(min(best / np.sqrt(saa * sbb), 1.0))


def kernel_score(k_est, k_true):
    return KernelScore(l2err(k_est, k_true), mnc(k_est, k_true))


def _pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image {a.shape} vs image {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10 * np.log10(peak ** 2 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, peak=1.0):
    """Mean structural similarity over all valid 11x11 Gaussian windows.

    Local statistics use a sigma=1.5 Gaussian window, stabilizers
    ``(0.01 peak)^2`` and ``(0.03 peak)^2``; channels are averaged.
    """
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    win = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    def filt(img):
        return signal.correlate(img, win, mode="valid", method="direct")

    values = []
    for ca, cb in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        mu_a, mu_b = filt(ca), filt(cb)
        var_a = filt(ca * ca) - mu_a ** 2
        var_b = filt(cb * cb) - mu_b ** 2
        cov = filt(ca * cb) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def image_score(a, b, peak=1.0):
    return ImageScore(psnr(a, b, peak), ssim(a, b, peak))
