"""RC-GAUSS and baseline nonlinearities with analytic derivatives.

All kernels are elementwise and accept scalars or arrays of any shape. They
compute in the dtype of ``x`` (float64 unless the caller chose otherwise).

The raised-cosine correction ``cos(pi*beta*u) / (1 - (2*beta*u)**2)`` has a
removable singularity at ``|u| = 1/(2*beta)``. Substituting
``w = 1/2 - beta*|u|`` turns it into ``(pi/2) * sinc(w) / (1 + 2*beta*|u|)``,
which is finite everywhere and equals ``pi/4`` at the singular point, so no
special casing is needed for values or derivatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

PI = math.pi
HALF_PI = math.pi / 2


class Kind(str, Enum):
    RC_GAUSS = "rc-gauss"
    SINE = "sine"
    FINER = "finer"
    GAUSSIAN = "gauss"
    RELU_PE = "relu-pe"
    RAISED_COSINE = "rc-only"
    SINC = "sinc-only"


class Task(str, Enum):
    FITTING = "fitting"
    RESTORATION = "restoration"


BAND_LIMITED = (Kind.RC_GAUSS, Kind.RAISED_COSINE, Kind.SINC)

# which of (T, sigma, zeta) the optimizer may touch
_LEARNABLE = {
    Kind.RC_GAUSS: (True, True, True),
    Kind.RAISED_COSINE: (True, False, True),
    Kind.SINC: (True, False, True),
}

_DEFAULT_OMEGA0 = {Kind.SINE: 30.0, Kind.FINER: 30.0, Kind.GAUSSIAN: 10.0}


def learnable_mask(kind: Kind) -> tuple[bool, bool, bool]:
    return _LEARNABLE.get(Kind(kind), (False, False, False))


@dataclass(frozen=True)
class ActivationSpec:
    """Nonlinearity kind plus its scalars.

    ``T``, ``sigma`` and ``zeta`` are learnable for the band-limited kinds;
    ``beta`` is always fixed. ``omega0`` scales the sine-family and Gaussian
    baselines.
    """

    kind: Kind = Kind.RC_GAUSS
    T: float = 1.0
    sigma: float = 2.0
    zeta: float = 1.0
    beta: float = 0.05
    omega0: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def theta(self) -> tuple[float, float, float]:
        return (self.T, self.sigma, self.zeta)

    def with_theta(self, theta) -> "ActivationSpec":
        t = np.asarray(theta, dtype=np.float64).reshape(-1)
        return replace(self, T=float(t[0]), sigma=float(t[1]), zeta=float(t[2]))

    @property
    def band_limited(self) -> bool:
        return self.kind in BAND_LIMITED


def default_spec(kind, **overrides) -> ActivationSpec:
    kind = Kind(kind)
    if kind in _DEFAULT_OMEGA0 and "omega0" not in overrides:
        overrides["omega0"] = _DEFAULT_OMEGA0[kind]
    return ActivationSpec(kind=kind, **overrides)


def init_activation(task, layer_index: int = 0, kind=Kind.RC_GAUSS) -> ActivationSpec:
    """Starting scalars for a hidden layer.

    T=1 and sigma=2 for every task; zeta=1 for fitting, zeta=0 for restoration
    (super-resolution, denoising), where a DC-centred basis avoids amplifying
    noise early on. ``layer_index`` is accepted for symmetry with per-layer
    configs; all layers start from the same values.
    """
    task = Task(task)
    zeta = 1.0 if task is Task.FITTING else 0.0
    return default_spec(kind, T=1.0, sigma=2.0, zeta=zeta, beta=0.05)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _series_cut(dtype):
    # below this |w| the direct slope (cos - sinc)/w loses more than ~1e-5
    # absolute to cancellation, so the Maclaurin series takes over
    return 1e-2 if np.dtype(dtype).itemsize <= 4 else 1e-3


def _gauss_tail(arg):
    """exp(-arg) for arg >= 0 with the far tail set to exactly 0.

    Past e^-60 (float32) or e^-650 (float64) the values are negligible but
    their products land in the subnormal range, which is very slow on x86.
    """
    g = np.exp(-arg)
    g[arg > (60.0 if arg.dtype.itemsize <= 4 else 650.0)] = 0
    return g


def _sinc_slope(w, slope=True):
    """``sinc(w) = sin(pi w)/(pi w)`` and ``d sinc/dw``, stable near zero."""
    pw = PI * w
    s = np.sin(pw)
    small = np.abs(w) < _series_cut(w.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = s / pw
        d = (np.cos(pw) - val) / w if slope else None
    if small.any():
        ws = w[small]
        q = (PI * ws) ** 2
        val[small] = 1 - q / 6 * (1 - q / 20 * (1 - q / 42 * (1 - q / 72 * (1 - q / 110))))
        if slope:
            # term-wise derivative of the Maclaurin series above
            p2 = PI * PI
            d[small] = p2 * ws * (
                -1 / 3 + q * (1 / 30 + q * (-1 / 840 + q * (1 / 45360 + q * (-1 / 3991680 + q / 518918400))))
            )
    return val, d


def _rc_parts(u, beta, slope=True, correction=True):
    """B(u) = sinc(u)*corr(u) and dB/du; ``correction=False`` gives plain sinc."""
    su, dsu = _sinc_slope(u, slope)
    if not correction:
        return su, dsu
    au = np.abs(u)
    den = 1 + 2 * beta * au
    sw, dsw = _sinc_slope(0.5 - beta * au, slope)
    corr = HALF_PI * sw / den
    B = su * corr
    if not slope:
        return B, None
    dcorr = -HALF_PI * beta * np.sign(u) * (dsw / den + 2 * sw / (den * den))
    return B, dsu * corr + su * dcorr


def _as_array(x):
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return np.atleast_1d(arr), arr.ndim == 0


def _band_limited(spec: ActivationSpec, x, partials: bool):
    T, sigma, zeta, beta = spec.T, spec.sigma, spec.zeta, spec.beta
    u = x / T
    B, dB = _rc_parts(u, beta, slope=partials, correction=spec.kind is not Kind.SINC)
    amp = B / T
    envelope = spec.kind is Kind.RC_GAUSS
    g = _gauss_tail((x * x) / (2 * sigma * sigma)) if envelope else None
    ag = amp * g if envelope else amp
    if zeta == 0.0:
        m, ms = 1.0, None
    else:
        phase = (2 * PI * zeta) * x
        m = np.cos(phase)
        ms = np.sin(phase) if partials else None
    y = ag * m
    if not partials:
        return y, None, None
    gm = g * m if envelope else m
    dydx = dB * gm / (T * T)
    if envelope:
        dydx -= y * x / (sigma * sigma)
    if ms is not None:
        dydx -= ag * ms * (2 * PI * zeta)
    dT = -(u * dB + B) * gm / (T * T)
    dsigma = y * (x * x) / sigma ** 3 if envelope else None
    if ms is not None:
        dzeta = -ag * ms * (2 * PI) * x
    else:
        # d/dzeta cos(2 pi zeta x) at zeta=0 vanishes
        dzeta = np.zeros_like(y)
    return y, dydx, (dT, dsigma, dzeta)


def _baseline(spec: ActivationSpec, x, partials: bool):
    w0 = spec.omega0
    kind = spec.kind
    if kind is Kind.SINE:
        z = w0 * x
        return np.sin(z), (w0 * np.cos(z) if partials else None), None
    if kind is Kind.FINER:
        ax = np.abs(x)
        z = w0 * (ax + 1) * x
        d = w0 * (2 * ax + 1) * np.cos(z) if partials else None
        return np.sin(z), d, None
    if kind is Kind.GAUSSIAN:
        y = _gauss_tail((w0 * x) ** 2)
        return y, (-2 * w0 * w0 * x * y if partials else None), None
    if kind is Kind.RELU_PE:
        y = np.maximum(x, 0)
        return y, ((x > 0).astype(x.dtype) if partials else None), None
    raise ValueError(f"not a baseline activation: {kind}")


_BLOCK = 1 << 15


def _kernel(spec: ActivationSpec, x, partials: bool):
    if spec.band_limited:
        return _band_limited(spec, x, partials)
    return _baseline(spec, x, partials)


def _dispatch(spec: ActivationSpec, x, partials: bool):
    # Elementwise chains run ~3x faster when the temporaries stay in cache,
    # so large inputs go through in flat blocks. Values are unchanged.
    if x.size <= 2 * _BLOCK:
        return _kernel(spec, x, partials)
    flat = np.ascontiguousarray(x).reshape(-1)
    outs = None
    for lo in range(0, flat.size, _BLOCK):
        res = _kernel(spec, flat[lo:lo + _BLOCK], partials)
        if outs is None:
            y, d, parts = res
            outs = (np.empty(flat.shape, y.dtype),
                    None if d is None else np.empty(flat.shape, d.dtype),
                    None if parts is None else tuple(None if p is None else np.empty(flat.shape, p.dtype)
                                                     for p in parts))
        sl = slice(lo, lo + _BLOCK)
        outs[0][sl] = res[0]
        if res[1] is not None:
            outs[1][sl] = res[1]
        if res[2] is not None:
            for dst, src in zip(outs[2], res[2]):
                if dst is not None:
                    dst[sl] = src
    y, d, parts = outs
    shape = x.shape
    return (y.reshape(shape), None if d is None else d.reshape(shape),
            None if parts is None else tuple(None if p is None else p.reshape(shape) for p in parts))


def evaluate(spec: ActivationSpec, x):
    arr, scalar = _as_array(x)
    y = _dispatch(spec, arr, False)[0]
    return float(y[0]) if scalar else y


def evaluate_with_partials(spec: ActivationSpec, x):
    """Return ``(y, dy/dx, (dy/dT, dy/dsigma, dy/dzeta))``.

    Entries of the last tuple are ``None`` for scalars the kind does not use;
    the whole tuple is ``None`` for kinds without shape scalars.
    """
    arr, scalar = _as_array(x)
    y, d, parts = _dispatch(spec, arr, True)
    if scalar:
        y, d = float(y[0]), float(d[0])
        if parts is not None:
            parts = tuple(None if p is None else float(p[0]) for p in parts)
    return y, d, parts


def rc_basis(x, T: float, beta: float):
    """Band-limited raised-cosine kernel ``sinc(x/T)/T * corr(x/T)``."""
    if not T > 0 or not 0 < beta <= 1:
        raise ValueError("need T > 0 and beta in (0, 1]")
    arr, scalar = _as_array(x)
    B, _ = _rc_parts(arr / T, beta, slope=False)
    y = B / T
    return float(y[0]) if scalar else y


def rc_gauss(x, spec: ActivationSpec):
    """Raised-cosine basis times a Gaussian envelope times ``cos(2 pi zeta x)``."""
    if spec.kind is not Kind.RC_GAUSS:
        raise ValueError(f"rc_gauss needs kind rc-gauss, got {spec.kind.value}")
    return evaluate(spec, x)


def baseline_activation(x, spec: ActivationSpec):
    if spec.kind is Kind.RC_GAUSS:
        raise ValueError("use rc_gauss for the rc-gauss kind")
    return evaluate(spec, x)


# ---------------------------------------------------------------------------
# weight initialization
# ---------------------------------------------------------------------------

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, spec: ActivationSpec | None,
                first: bool, hidden_kind: Kind | None = None, dtype=np.float64):
    """Weights (fan_in x fan_out) and bias (1 x fan_out) for one layer.

    ``spec`` is the layer's own activation, ``None`` for the linear head; the
    head follows the hidden activation's scheme via ``hidden_kind``.
    """
    kind = spec.kind if spec is not None else hidden_kind
    bias_bound = 1.0 / math.sqrt(fan_in)
    if kind in BAND_LIMITED and spec is not None:
        w_bound = math.sqrt(6.0 / fan_in)
    elif kind in (Kind.SINE, Kind.FINER):
        omega0 = spec.omega0 if spec is not None else _DEFAULT_OMEGA0[kind]
        w_bound = 1.0 / fan_in if first else math.sqrt(6.0 / fan_in) / omega0
        if kind is Kind.FINER and first:
            bias_bound = 1.0
    else:
        w_bound = 1.0 / math.sqrt(fan_in)
    W = rng.uniform(-w_bound, w_bound, size=(fan_in, fan_out)).astype(dtype)
    b = rng.uniform(-bias_bound, bias_bound, size=(1, fan_out)).astype(dtype)
    return W, b
