"""Image quality metrics and the least-significant-bit steganography baseline.

Images are float arrays in [0, 1] with shape [H, W] or [H, W, C]; metrics are
computed in float64 with a peak value of 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mse_per_channel: list

    def to_dict(self) -> dict:
        return {
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "ssim": self.ssim,
            "mse_per_channel": self.mse_per_channel,
        }


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / err))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the first two axes, no padding
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean structural similarity: 11x11 Gaussian window, per channel then averaged."""
    m = ssim_map(a, b)
    if m.ndim == 3:
        return float(np.mean(m.mean(axis=(0, 1))))
    return float(m.mean())


def compare(a, b) -> MetricReport:
    a, b = _pair(a, b)
    per = ((a - b) ** 2).reshape(-1, a.shape[-1] if a.ndim == 3 else 1).mean(axis=0)
    return MetricReport(psnr(a, b), ssim(a, b), [float(x) for x in per])


def residual(a, b, gain: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    return np.clip(gain * np.abs(a - b), 0.0, 1.0)


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def lsb_embed(cover: np.ndarray, bits) -> np.ndarray:
    """Write ``bits`` into the lowest bit of each channel byte, row-major."""
    cover = np.asarray(cover)
    if cover.dtype != np.uint8:
        raise ValueError("cover must be an 8-bit image")
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size and bits.max() > 1:
        raise ValueError("bits must be 0 or 1")
    if bits.size > cover.size:
        raise ValueError(f"{bits.size} bits exceed capacity of {cover.size}")
    flat = cover.ravel().copy()
    flat[: bits.size] = (flat[: bits.size] & 0xFE) | bits
    return flat.reshape(cover.shape)


def lsb_extract(stego: np.ndarray, n_bits: int) -> np.ndarray:
    stego = np.asarray(stego)
    if n_bits > stego.size:
        raise ValueError(f"{n_bits} bits exceed capacity of {stego.size}")
    return (stego.ravel()[:n_bits] & 1).astype(np.uint8)


def image_to_bits(img) -> np.ndarray:
    return np.unpackbits(to_uint8(img).ravel())


def bits_to_image(bits, shape) -> np.ndarray:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).reshape(shape).astype(np.float64) / 255
