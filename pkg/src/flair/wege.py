"""Wavelet-energy guidance channel for 2D coordinate networks.

Pipeline: grayscale image -> single-level orthonormal Haar DWT -> per-pixel
energy score (high-band reconstruction minus low-band reconstruction) ->
min-max normalization -> edge-preserving filtering -> bilinear lookup at the
query coordinates, appended to ``(x, y)`` as a third input channel.

Sub-band naming follows the PyWavelets convention for ``dwt2``: ``LH`` is the
horizontal-detail band (differences across rows), ``HL`` the vertical-detail
band (differences across columns), ``HH`` the diagonal band.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensorgraph import ContractError

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] == 1:
            return image[:, :, 0]
        return image[:, :, :3] @ LUMA
    return image


def dwt2(image: np.ndarray) -> dict[str, np.ndarray]:
    """Single-level orthonormal Haar decomposition.

    Odd dimensions are padded by edge replication; each band is
    ``ceil(H/2) x ceil(W/2)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ContractError(f"dwt2 needs a non-empty 2-D image, got shape {img.shape}")
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    a = img[0::2, 0::2]
    b = img[0::2, 1::2]
    c = img[1::2, 0::2]
    d = img[1::2, 1::2]
    return {
        "LL": (a + b + c + d) / 2,
        "LH": (a + b - c - d) / 2,
        "HL": (a - b + c - d) / 2,
        "HH": (a - b - c + d) / 2,
    }


def idwt2(bands: dict[str, np.ndarray], shape: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of :func:`dwt2`; missing bands are treated as zero.

    ``shape`` crops the reconstruction back to an odd original size.
    """
    ref = next(v for v in bands.values() if v is not None)
    zero = np.zeros_like(ref)
    ll, lh, hl, hh = (bands.get(k) if bands.get(k) is not None else zero for k in ("LL", "LH", "HL", "HH"))
    out = np.empty((2 * ref.shape[0], 2 * ref.shape[1]))
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    if shape is not None:
        out = out[: shape[0], : shape[1]]
    return out


def band_reconstructions(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(high, low)``: inverse transforms of the detail bands and of LL alone."""
    gray = to_gray(image)
    bands = dwt2(gray)
    high = idwt2({"LH": bands["LH"], "HL": bands["HL"], "HH": bands["HH"]}, gray.shape)
    low = idwt2({"LL": bands["LL"]}, gray.shape)
    return high, low


def energy_map(image: np.ndarray, mode: str = "literal") -> np.ndarray:
    """Per-pixel energy score.

    ``literal``: high-band reconstruction minus low-band reconstruction.
    ``abs``: magnitude of the high-band reconstruction only.
    """
    high, low = band_reconstructions(image)
    if mode == "literal":
        return high - low
    if mode == "abs":
        return np.abs(high)
    raise ValueError(f"unknown energy mode {mode!r}")


def normalize_scores(raw: np.ndarray, norm_eps: float = 1e-8) -> np.ndarray:
    if not norm_eps > 0:
        raise ValueError("norm_eps must be positive")
    lo, hi = raw.min(), raw.max()
    return (raw - lo) / (hi - lo + norm_eps)


def box_mean(img: np.ndarray, r: int) -> np.ndarray:
    return ndimage.uniform_filter(img, size=2 * r + 1, mode="nearest")


def guided_filter(guide: np.ndarray, scores: np.ndarray, r: int = 4, reg: float = 1e-3) -> np.ndarray:
    """Grayscale guided filter with edge-replicated (2r+1)^2 windows."""
    guide = np.asarray(guide, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if guide.shape != scores.shape or guide.ndim != 2:
        raise ContractError(f"guide {guide.shape} and scores {scores.shape} must be equal 2-D shapes")
    if r < 1 or r >= min(guide.shape):
        raise ContractError(f"radius {r} must satisfy 1 <= r < min(H, W) = {min(guide.shape)}")
    if not reg > 0:
        raise ContractError("reg must be positive")
    mean_i = box_mean(guide, r)
    mean_p = box_mean(scores, r)
    cov_ip = box_mean(guide * scores, r) - mean_i * mean_p
    var_i = box_mean(guide * guide, r) - mean_i * mean_i
    a = cov_ip / (var_i + reg)
    b = mean_p - a * mean_i
    return box_mean(a, r) * guide + box_mean(b, r)


def bilateral_filter(scores: np.ndarray, spatial_sigma: float = 2.0, range_sigma: float = 0.1,
                     radius: int | None = None) -> np.ndarray:
    """Bilateral smoothing of the score map itself (no separate guide).

    The window radius defaults to ``ceil(2 * spatial_sigma)``; borders use
    edge replication. ``range_sigma = inf`` reduces to a normalized Gaussian blur.
    """
    if not (spatial_sigma > 0 and range_sigma > 0):
        raise ContractError("sigmas must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    r = int(math.ceil(2 * spatial_sigma)) if radius is None else int(radius)
    h, w = scores.shape
    padded = np.pad(scores, r, mode="edge")
    num = np.zeros_like(scores)
    den = np.zeros_like(scores)
    inv_range = 0.0 if math.isinf(range_sigma) else 1.0 / (2 * range_sigma ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy: r + dy + h, r + dx: r + dx + w]
            diff = shifted - scores
            wgt = math.exp(-(dx * dx + dy * dy) / (2 * spatial_sigma ** 2)) * np.exp(-(diff * diff) * inv_range)
            num += wgt * shifted
            den += wgt
    return num / den


@dataclass(frozen=True)
class EnergyMap:
    raw: np.ndarray
    normalized: np.ndarray
    filtered: np.ndarray
    radius: int
    reg: float
    norm_eps: float
    method: str = "guided"

    @property
    def shape(self):
        return self.raw.shape


def build_energy_map(image: np.ndarray, method: str = "guided", r: int = 4, reg: float = 1e-3,
                     norm_eps: float = 1e-8, spatial_sigma: float = 2.0, range_sigma: float = 0.1,
                     mode: str = "literal") -> EnergyMap:
    """Full guidance map for ``image``; ``method`` is guided, bilateral or none."""
    gray = to_gray(image)
    raw = energy_map(gray, mode)
    norm = normalize_scores(raw, norm_eps)
    if method == "guided":
        filt = guided_filter(gray, norm, r, reg)
    elif method == "bilateral":
        filt = bilateral_filter(norm, spatial_sigma, range_sigma)
    elif method == "none":
        filt = norm.copy()
    else:
        raise ValueError(f"unknown filter {method!r}")
    for arr in (raw, norm, filt):
        arr.setflags(write=False)
    return EnergyMap(raw, norm, filt, r, reg, norm_eps, method)


def sample_guidance(emap: EnergyMap | np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear lookup of the filtered map at ``(x, y)`` coordinates in [-1, 1]^2.

    Pixel centres sit at ``(i + 0.5) / size * 2 - 1``; lookups at a centre
    return that pixel's value exactly. Returns an ``(N, 1)`` column.
    """
    grid = emap.filtered if isinstance(emap, EnergyMap) else np.asarray(emap)
    h, w = grid.shape
    coords = np.asarray(coords, dtype=np.float64)
    px = np.clip((coords[:, 0] + 1) / 2 * w - 0.5, 0, w - 1)
    py = np.clip((coords[:, 1] + 1) / 2 * h - 0.5, 0, h - 1)
    # snap round-off so knots hit exactly
    for p in (px, py):
        near = np.abs(p - np.rint(p)) < 1e-9
        p[near] = np.rint(p[near])
    x0 = np.minimum(np.floor(px).astype(int), w - 1)
    y0 = np.minimum(np.floor(py).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    exact = (fx == 0) & (fy == 0)
    out[exact] = grid[y0[exact], x0[exact]]
    return out[:, None]


def dump_maps(emap: EnergyMap, out_dir) -> list[Path]:
    """Write raw/normalized/filtered maps as 16-bit PNG plus CSV for inspection."""
    from .imageio import write_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("raw", "normalized", "filtered"):
        arr = getattr(emap, name)
        lo, hi = float(arr.min()), float(arr.max())
        scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        png = out_dir / f"wege_{name}.png"
        write_png(png, scaled, bitdepth=16)
        csv = out_dir / f"wege_{name}.csv"
        np.savetxt(csv, arr, delimiter=",", fmt="%.10g")
        written += [png, csv]
    return written
