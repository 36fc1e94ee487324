"""Spectral diagnostics: empirical NTK, scan-line STFT, neuron spectra, TFUP product."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import windows

from .activations import ActivationSpec, evaluate, evaluate_with_partials, init_linear
from .inrnet import InrModel
from .tasks import pixel_grid
from .tensorgraph import ContractError
from .wege import to_gray

DB_FLOOR = -120.0


class SpectrumError(ArithmeticError):
    """Eigendecomposition failed; the message carries conditioning diagnostics."""


@dataclass
class KernelSpectrum:
    gram: np.ndarray          # n x n
    eigenvalues: np.ndarray   # descending
    inputs: np.ndarray        # n grid points

    def ratio(self, k: int) -> float:
        """``lambda_k / lambda_1`` with 1-based ``k``."""
        return float(self.eigenvalues[k - 1] / self.eigenvalues[0])


@dataclass
class Spectrogram:
    window: int
    hop: int
    magnitudes_db: np.ndarray   # frames x bins
    freq_axis: np.ndarray       # cycles per sample, bins = window // 2 + 1
    frame_starts: np.ndarray    # window start index of each frame
    magnitudes: np.ndarray      # linear |X|

    @property
    def overlap(self) -> float:
        return 1.0 - self.hop / self.window


@dataclass
class NeuronSpectra:
    responses: np.ndarray    # neurons x G x G
    magnitudes: np.ndarray   # neurons x G x G, centred (fftshift)
    freq_axis: np.ndarray    # cycles per unit length, centred

    def peak(self, neuron: int) -> tuple[float, float]:
        """``(fx, fy)`` of the strongest non-negative-x bin of one neuron."""
        mag = self.magnitudes[neuron]
        r, c = np.unravel_index(np.argmax(mag), mag.shape)
        return float(abs(self.freq_axis[c])), float(self.freq_axis[r])


# ---------------------------------------------------------------------------
# neural tangent kernel
# ---------------------------------------------------------------------------

def _ntk_features(spec: ActivationSpec, x: np.ndarray, n_neurons: int, rng) -> np.ndarray:
    """Per-sample gradient of ``sum_k c_k act(w_k x + b_k)`` w.r.t. (c, w, b)."""
    w, b = init_linear(rng, 1, n_neurons, spec, first=True)
    c, _ = init_linear(rng, n_neurons, 1, None, first=False, hidden_kind=spec.kind)
    z = x[:, None] * w + b
    act, dact, _ = evaluate_with_partials(spec, z)
    cd = dact * c[:, 0]
    return np.hstack([act, cd * x[:, None], cd])


def empirical_ntk(activation: ActivationSpec, n_inputs: int = 128, n_neurons: int = 1024,
                  n_seeds: int = 32, seed: int = 0) -> KernelSpectrum:
    """Monte-Carlo NTK of a one-hidden-layer scalar network on a uniform grid in [-1, 1].

    Gram entries are averaged over ``n_seeds`` initializations (seed order is
    fixed, so the sum is reproducible) and divided by ``n_neurons``.
    """
    if n_seeds < 1 or n_inputs < 2 or n_neurons < 1:
        raise ContractError("need n_seeds >= 1, n_inputs >= 2, n_neurons >= 1")
    x = np.linspace(-1.0, 1.0, n_inputs)
    gram = np.zeros((n_inputs, n_inputs))
    for s in range(n_seeds):
        J = _ntk_features(activation, x, n_neurons, np.random.default_rng([seed, s]))
        gram += J @ J.T
    gram /= n_seeds * n_neurons
    gram = 0.5 * (gram + gram.T)
    if not np.isfinite(gram).all():
        raise SpectrumError("NTK Gram matrix has non-finite entries")
    try:
        evals = np.linalg.eigvalsh(gram)
    except np.linalg.LinAlgError as exc:
        diag = np.diag(gram)
        raise SpectrumError(
            f"symmetric eigensolver failed ({exc}); trace={diag.sum():.3e}, "
            f"max|G|={np.abs(gram).max():.3e}, min diag={diag.min():.3e}"
        ) from exc
    return KernelSpectrum(gram, evals[::-1].copy(), x)


# ---------------------------------------------------------------------------
# STFT along one image row
# ---------------------------------------------------------------------------

def stft_signal(line: np.ndarray, window: int = 256, hop: int = 64) -> Spectrogram:
    line = np.asarray(line, dtype=np.float64).ravel()
    if window < 2 or hop < 1:
        raise ContractError("window must be >= 2 and hop >= 1")
    if line.size < window:
        raise ContractError(f"signal length {line.size} shorter than window {window}")
    starts = np.arange(0, line.size - window + 1, hop)
    taper = windows.hann(window, sym=False)
    frames = np.lib.stride_tricks.sliding_window_view(line, window)[starts] * taper
    mags = np.abs(np.fft.rfft(frames, axis=1))
    db = np.maximum(20.0 * np.log10(mags + 1e-12), DB_FLOOR)
    freqs = np.arange(window // 2 + 1) / window
    return Spectrogram(window, hop, db, freqs, starts, mags)


def stft_line(image: np.ndarray, row: int | None = None, window: int = 256, hop: int = 64) -> Spectrogram:
    """Hann-windowed STFT of one horizontal scan line (luma for colour images).

    ``row=None`` picks the middle row.
    """
    img = np.asarray(image, dtype=np.float64)
    gray = to_gray(img) if img.ndim == 3 else img
    if gray.ndim != 2:
        raise ContractError(f"expected an image, got shape {img.shape}")
    h, w = gray.shape
    row = h // 2 if row is None else row
    if not 0 <= row < h:
        raise ContractError(f"row {row} out of bounds for height {h}")
    if w < window:
        raise ContractError(f"image width {w} smaller than window {window}")
    return stft_signal(gray[row], window, hop)


# ---------------------------------------------------------------------------
# first-layer neuron spectra
# ---------------------------------------------------------------------------

def neuron_fft(model: InrModel, layer: int = 1, grid: int = 128) -> NeuronSpectra:
    """Centred 2-D FFT magnitudes (orthonormal) of each neuron in ``layer``.

    Neurons are sampled at the pixel centres of a ``grid`` x ``grid`` raster
    over [-1, 1]^2. Inputs beyond the two spatial axes (the WEGE channel) are
    held at zero.
    """
    coords = pixel_grid(grid, grid)
    if model.input_dim > 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], model.input_dim - 2))])
    resp = model.hidden_response(coords, layer).astype(np.float64)
    resp = resp.T.reshape(-1, grid, grid)
    spec = np.fft.fftshift(np.fft.fft2(resp, norm="ortho"), axes=(1, 2))
    freqs = np.fft.fftshift(np.fft.fftfreq(grid, d=2.0 / grid))
    return NeuronSpectra(resp, np.abs(spec), freqs)


# ---------------------------------------------------------------------------
# time-frequency uncertainty
# ---------------------------------------------------------------------------

def _basis_samples(spec: ActivationSpec, domain_halfwidth: float, samples: int):
    if samples < 4096:
        raise ContractError("need at least 4096 samples")
    if spec.band_limited:
        spec = replace(spec, zeta=0.0)
    t = np.linspace(-domain_halfwidth, domain_halfwidth, samples, endpoint=False)
    psi = evaluate(spec, t)
    if not np.abs(psi).max() > 1e-300:
        raise ContractError("basis is numerically zero on the sampled domain")
    return t, psi


def basis_spectrum(spec: ActivationSpec, domain_halfwidth: float = 64.0, samples: int = 16384):
    """``(freq, |FFT|)`` of the basis (zeta forced to 0), frequencies ascending."""
    t, psi = _basis_samples(spec, domain_halfwidth, samples)
    dt = t[1] - t[0]
    mag = np.abs(np.fft.fftshift(np.fft.fft(psi))) * dt
    return np.fft.fftshift(np.fft.fftfreq(samples, d=dt)), mag


def _spread(axis: np.ndarray, weight: np.ndarray) -> float:
    p = weight / weight.sum()
    mu = np.dot(p, axis)
    return math.sqrt(np.dot(p, (axis - mu) ** 2))


def uncertainty_product(spec: ActivationSpec, domain_halfwidth: float = 64.0,
                        samples: int = 16384) -> tuple[float, float, float]:
    """``(sigma_t, sigma_f, sigma_t * sigma_f)`` of the basis evaluated with zeta = 0.

    Spreads are standard deviations of |psi|^2 over time and of |FFT|^2 over
    frequency (cycles per unit), each normalized to unit mass.
    """
    t, psi = _basis_samples(spec, domain_halfwidth, samples)
    freq, mag = basis_spectrum(spec, domain_halfwidth, samples)
    sigma_t = _spread(t, psi * psi)
    sigma_f = _spread(freq, mag * mag)
    return sigma_t, sigma_f, sigma_t * sigma_f


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_ntk_csv(path, spectrum: KernelSpectrum) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "eigenvalue"])
        for i, v in enumerate(spectrum.eigenvalues, 1):
            wr.writerow([i, repr(float(v))])
    return path


def write_stft_csv(path, spectrogram: Spectrogram) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "window_start", "bin", "frequency", "db"])
        for f, start in enumerate(spectrogram.frame_starts):
            for b, freq in enumerate(spectrogram.freq_axis):
                wr.writerow([f, int(start), b, repr(float(freq)), repr(float(spectrogram.magnitudes_db[f, b]))])
    return path


def write_uncertainty_csv(path, rows: list[tuple[ActivationSpec, tuple[float, float, float]]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "T", "sigma", "beta", "omega0", "sigma_t", "sigma_f", "product", "bound"])
        for spec, (st, sf, prod) in rows:
            wr.writerow([spec.kind.value, spec.T, spec.sigma, spec.beta, spec.omega0,
                         repr(st), repr(sf), repr(prod), repr(1 / (4 * math.pi))])
    return path
