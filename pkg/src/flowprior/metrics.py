"""PSNR, SSIM and test-set aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeMismatchError

PSNR_CAP = 100.0


class ImageTooSmallError(ValueError):
    pass


def psnr(x, truth, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``PSNR_CAP`` when the images are identical."""
    x = np.asarray(x, dtype=DTYPE)
    truth = np.asarray(truth, dtype=DTYPE)
    if x.shape != truth.shape:
        raise ShapeMismatchError(f"{x.shape} != {truth.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - truth) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter(img, g, boundary):
    """Separable window average of a (H, W) image."""
    k = len(g)
    if boundary == "circular":
        r = k // 2
        img = np.concatenate([img[-r:], img, img[:r]], axis=0)
        img = np.concatenate([img[:, -r:], img, img[:, :r]], axis=1)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(x, truth, peak=1.0, window=11, sigma=1.5, boundary="valid"):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Images are ``(C, H, W)`` or ``(H, W)``. With ``boundary="valid"`` only
    window positions fully inside the image are averaged;
    ``boundary="circular"`` wraps the window around the edges instead.
    The result is the mean over positions, averaged over channels.
    """
    x = np.asarray(x, dtype=DTYPE)
    truth = np.asarray(truth, dtype=DTYPE)
    if x.shape != truth.shape:
        raise ShapeMismatchError(f"{x.shape} != {truth.shape}")
    if x.ndim == 2:
        x, truth = x[None], truth[None]
    if min(x.shape[-2:]) < window:
        raise ImageTooSmallError(f"SSIM needs H, W >= {window}, got {x.shape[-2:]}")
    if boundary not in ("valid", "circular"):
        raise ValueError(f"unknown boundary {boundary!r}")
    if np.array_equal(x, truth):
        return 1.0
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = _gaussian_window(window, sigma)
    values = []
    for a, b in zip(x, truth):
        mu_a = _filter(a, g, boundary)
        mu_b = _filter(b, g, boundary)
        var_a = _filter(a * a, g, boundary) - mu_a**2
        var_b = _filter(b * b, g, boundary) - mu_b**2
        cov = _filter(a * b, g, boundary) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def mean_std(values):
    """Arithmetic mean and sample (n-1) standard deviation, via Welford updates."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError("need at least two values to aggregate")
    mean = 0.0
    m2 = 0.0
    for n, v in enumerate(values, start=1):
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    return mean, math.sqrt(max(m2, 0.0) / (len(values) - 1))


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, x, truth, peak=1.0):
        self.psnr.append(psnr(x, truth, peak))
        self.ssim.append(ssim(x, truth, peak))

    def aggregate(self):
        """``{"psnr": (mean, std), "ssim": (mean, std)}``."""
        return {"psnr": mean_std(self.psnr), "ssim": mean_std(self.ssim)}


def aggregate(reports):
    """Merge per-image reports and return mean and sample std per metric."""
    merged = MetricReport()
    for r in reports:
        merged.psnr.extend(r.psnr)
        merged.ssim.extend(r.ssim)
    return merged.aggregate()
