"""PSNR, SSIM and IoU."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass
class MetricResult:
    psnr: float
    ssim: float
    iou: float | None = None

    def as_dict(self) -> dict:
        out = {"psnr": self.psnr, "ssim": self.ssim}
        if self.iou is not None:
            out["iou"] = self.iou
        return out


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_taps() -> np.ndarray:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, taps, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, taps, axis=1, mode="nearest")
    p = len(taps) // 2
    return out[p:-p, p:-p]


def _ssim_channel(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    taps = _gaussian_taps()
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5); RGB averages channels."""
    a, b = _check_shapes(a, b)
    if a.ndim not in (2, 3):
        raise ValueError(f"expected H x W or H x W x C, got {a.shape}")
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    if a.ndim == 2:
        return _ssim_channel(a, b, peak)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], peak) for c in range(a.shape[2])]))


def iou(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    for arr in (pred, target):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("iou expects binary {0, 1} inputs")
    p = pred.astype(bool)
    t = target.astype(bool)
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union
