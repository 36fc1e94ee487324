"""Dense-matrix tape with reverse-mode differentiation and Adam.

A :class:`Tape` records a fixed topology of matrix operations. Every node holds
a 2-D ``numpy`` array. Parameters are stored by reference, so an optimizer
that updates them in place is immediately visible to the next forward pass.

    tape = Tape()
    x = tape.input(2, name="coords")
    w = tape.param(np.zeros((2, 8)))
    b = tape.param(np.zeros((1, 8)))
    h = tape.add_bias(tape.matmul(x, w), b)
    ...
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import activations


class DimensionError(ValueError):
    """Operand shapes do not fit the recorded operation."""


class ContractError(ValueError):
    """A call violated an operation precondition."""


class TrainingDivergence(FloatingPointError):
    """Non-finite loss or gradient encountered during optimization."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None

    def label(self, idx: int) -> str:
        return f"node {idx} ({self.op}{' ' + repr(self.name) if self.name else ''})"


@dataclass
class Record:
    """Values and backward caches of one forward pass."""

    values: list[np.ndarray]
    caches: list[Any]


# ---------------------------------------------------------------------------
# op kernels: forward(node, args, need_cache) -> (out, cache)
#             backward(node, gout, args, out, cache) -> grads per input
# ---------------------------------------------------------------------------

def _matmul_fwd(node, args, need_cache):
    a, b = args
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b, None


def _matmul_bwd(node, g, args, out, cache):
    a, b = args
    return g @ b.T, a.T @ g


def _add_bias_fwd(node, args, need_cache):
    x, b = args
    if b.shape != (1, x.shape[1]):
        raise DimensionError(f"bias shape {b.shape} does not broadcast over {x.shape}")
    return x + b, None


def _add_bias_bwd(node, g, args, out, cache):
    return g, g.sum(axis=0, keepdims=True)


def _same_shape(args):
    if args[0].shape != args[1].shape:
        raise DimensionError(f"shapes differ: {args[0].shape} vs {args[1].shape}")


def _add_fwd(node, args, need_cache):
    _same_shape(args)
    return args[0] + args[1], None


def _add_bwd(node, g, args, out, cache):
    return g, g


def _mul_fwd(node, args, need_cache):
    _same_shape(args)
    return args[0] * args[1], None


def _mul_bwd(node, g, args, out, cache):
    return g * args[1], g * args[0]


def _scale_fwd(node, args, need_cache):
    return args[0] * node.attrs["factor"], None


def _scale_bwd(node, g, args, out, cache):
    return (g * node.attrs["factor"],)


def _sin_fwd(node, args, need_cache):
    return np.sin(args[0]), None


def _sin_bwd(node, g, args, out, cache):
    return (g * np.cos(args[0]),)


def _square_fwd(node, args, need_cache):
    return args[0] * args[0], None


def _square_bwd(node, g, args, out, cache):
    return (2.0 * g * args[0],)


def _sum_fwd(node, args, need_cache):
    return np.array([[args[0].sum()]], dtype=args[0].dtype), None


def _sum_bwd(node, g, args, out, cache):
    return (np.full_like(args[0], g[0, 0]),)


def _mse_fwd(node, args, need_cache):
    pred, target = args
    _same_shape(args)
    if pred.shape[0] == 0:
        raise ContractError("mse over zero samples")
    diff = pred - target
    # (1/N) sum_i ||pred_i - target_i||^2, squared L2 over the output row
    loss = np.einsum("ij,ij->", diff, diff) / pred.shape[0]
    return np.array([[loss]], dtype=pred.dtype), diff if need_cache else None


def _mse_bwd(node, g, args, out, cache):
    diff = cache
    scale = 2.0 * g[0, 0] / diff.shape[0]
    return diff * scale, None


def _bce_fwd(node, args, need_cache):
    logits, target = args
    _same_shape(args)
    if logits.shape[0] == 0:
        raise ContractError("bce over zero samples")
    # softplus(z) - y*z, summed over the output row, averaged over rows
    sp = np.logaddexp(0, logits)
    loss = (sp.sum() - np.einsum("ij,ij->", target, logits)) / logits.shape[0]
    return np.array([[loss]], dtype=logits.dtype), None


def _bce_bwd(node, g, args, out, cache):
    logits, target = args
    prob = 0.5 * (1 + np.tanh(0.5 * logits))
    return (prob - target) * (g[0, 0] / logits.shape[0]), None


def _activation_fwd(node, args, need_cache):
    x = args[0]
    theta = args[1] if len(args) > 1 else None
    spec = node.attrs["spec"]
    if theta is not None:
        spec = spec.with_theta(theta)
    if not need_cache:
        return activations.evaluate(spec, x), None
    y, dydx, partials = activations.evaluate_with_partials(spec, x)
    return y, (dydx, partials)


def _activation_bwd(node, g, args, out, cache):
    dydx, partials = cache
    gx = g * dydx
    if len(args) == 1:
        return (gx,)
    spec = node.attrs["spec"]
    mask = activations.learnable_mask(spec.kind)
    gtheta = np.zeros((1, 3), dtype=args[1].dtype)
    for k, part in enumerate(partials):
        if part is not None and mask[k]:
            gtheta[0, k] = np.einsum("ij,ij->", g, part)
    return gx, gtheta


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add_bias": (_add_bias_fwd, _add_bias_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "sin": (_sin_fwd, _sin_bwd),
    "square": (_square_fwd, _square_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mse": (_mse_fwd, _mse_bwd),
    "bce_logits": (_bce_fwd, _bce_bwd),
    "activation": (_activation_fwd, _activation_bwd),
}


class Tape:
    """Topologically ordered record of matrix operations.

    Node ids are list indices; a node can only consume ids created before it,
    so the list order is a valid evaluation order and its reverse a valid
    adjoint order.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._params: dict[int, np.ndarray] = {}
        self._inputs: list[int] = []
        self.record: Record | None = None

    def __len__(self):
        return len(self.nodes)

    # -- construction -----------------------------------------------------
    def _push(self, op: str, inputs: Sequence[int], name=None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ContractError(f"{op}: unknown input node {i}")
        self.nodes.append(Node(op, tuple(inputs), attrs, name))
        return len(self.nodes) - 1

    def input(self, cols: int, name: str | None = None) -> int:
        idx = self._push("input", (), name, cols=int(cols))
        self._inputs.append(idx)
        return idx

    def param(self, value: np.ndarray, name: str | None = None) -> int:
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        idx = self._push("param", (), name)
        self._params[idx] = value
        return idx

    def matmul(self, a, b, name=None):
        return self._push("matmul", (a, b), name)

    def add_bias(self, x, b, name=None):
        return self._push("add_bias", (x, b), name)

    def add(self, a, b, name=None):
        return self._push("add", (a, b), name)

    def mul(self, a, b, name=None):
        return self._push("mul", (a, b), name)

    def scale(self, a, factor: float, name=None):
        return self._push("scale", (a,), name, factor=float(factor))

    def sin(self, a, name=None):
        return self._push("sin", (a,), name)

    def square(self, a, name=None):
        return self._push("square", (a,), name)

    def sum(self, a, name=None):
        return self._push("sum", (a,), name)

    def mse(self, pred, target, name=None):
        return self._push("mse", (pred, target), name)

    def bce_logits(self, logits, target, name=None):
        return self._push("bce_logits", (logits, target), name)

    def activation(self, x, spec, theta: int | None = None, name=None):
        """Elementwise nonlinearity; ``theta`` is an optional 1x3 node (T, sigma, zeta)."""
        inputs = (x,) if theta is None else (x, theta)
        return self._push("activation", inputs, name, spec=spec)

    # -- access -----------------------------------------------------------
    @property
    def params(self) -> list[int]:
        return list(self._params)

    @property
    def inputs(self) -> list[int]:
        return list(self._inputs)

    def param_value(self, idx: int) -> np.ndarray:
        return self._params[idx]

    def value(self, idx: int) -> np.ndarray:
        if self.record is None:
            raise ContractError("no recorded forward pass")
        return self.record.values[idx]

    # -- evaluation -------------------------------------------------------
    def _bind_inputs(self, inputs) -> dict[int, np.ndarray]:
        if isinstance(inputs, Mapping):
            by_name = {self.nodes[i].name: i for i in self._inputs}
            bound = {}
            for key, val in inputs.items():
                idx = key if isinstance(key, int) else by_name.get(key)
                if idx not in self._inputs:
                    raise ContractError(f"unknown input {key!r}")
                bound[idx] = val
        else:
            inputs = list(inputs)
            if len(inputs) != len(self._inputs):
                raise ContractError(f"expected {len(self._inputs)} inputs, got {len(inputs)}")
            bound = dict(zip(self._inputs, inputs))
        for idx in self._inputs:
            if idx not in bound:
                raise ContractError(f"missing input for {self.nodes[idx].label(idx)}")
            val = np.asarray(bound[idx], dtype=self.dtype)
            cols = self.nodes[idx].attrs["cols"]
            if val.ndim != 2 or val.shape[1] != cols:
                raise DimensionError(
                    f"{self.nodes[idx].label(idx)} expects (N, {cols}), got {val.shape}"
                )
            bound[idx] = val
        return bound

    def forward(self, inputs, *, until: int | None = None, record: bool = True) -> np.ndarray:
        """Evaluate the tape and return the value of node ``until`` (default: last).

        With ``record=False`` nothing is written to the tape, so concurrent
        evaluation of frozen parameters is safe.
        """
        bound = self._bind_inputs(inputs)
        stop = len(self.nodes) - 1 if until is None else until
        values: list[np.ndarray | None] = [None] * (stop + 1)
        caches: list[Any] = [None] * (stop + 1)
        for idx in range(stop + 1):
            node = self.nodes[idx]
            if node.op == "input":
                values[idx] = bound[idx]
                continue
            if node.op == "param":
                values[idx] = self._params[idx]
                continue
            fwd = _OPS[node.op][0]
            try:
                out, cache = fwd(node, [values[i] for i in node.inputs], record)
            except DimensionError as exc:
                raise DimensionError(f"{node.label(idx)}: {exc}") from None
            values[idx] = out
            caches[idx] = cache
        if record:
            self.record = Record(values, caches)
        return values[stop]

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Adjoints of ``loss`` with respect to every parameter node."""
        if self.record is None or len(self.record.values) <= loss:
            raise ContractError("backward called before a forward pass reaching the loss node")
        values, caches = self.record.values, self.record.caches
        if values[loss].shape != (1, 1):
            raise ContractError(f"{self.nodes[loss].label(loss)} is not scalar: {values[loss].shape}")
        adjoints: list[np.ndarray | None] = [None] * (loss + 1)
        adjoints[loss] = np.ones((1, 1), dtype=values[loss].dtype)
        for idx in range(loss, -1, -1):
            g = adjoints[idx]
            node = self.nodes[idx]
            if g is None or node.op in ("input", "param"):
                continue
            bwd = _OPS[node.op][1]
            grads = bwd(node, g, [values[i] for i in node.inputs], values[idx], caches[idx])
            for src, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                adjoints[src] = gi if adjoints[src] is None else adjoints[src] + gi
            if idx != loss:
                adjoints[idx] = None
        out = {}
        for idx, val in self._params.items():
            if idx <= loss and adjoints[idx] is not None:
                out[idx] = adjoints[idx]
            else:
                out[idx] = np.zeros_like(val)
        return out


def forward(tape: Tape, inputs, **kw) -> np.ndarray:
    return tape.forward(inputs, **kw)


def backward(tape: Tape, loss: int) -> dict[int, np.ndarray]:
    return tape.backward(loss)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`TrainingDivergence` (before touching anything) if a
    gradient is non-finite; its ``iteration`` is the step that would have run.
    """
    if len(grads) != len(params) or len(params) != len(state.first_moment):
        raise ContractError(f"expected {len(state.first_moment)} parameters and gradients, "
                            f"got {len(params)} and {len(grads)}")
    for p, g, m in zip(params, grads, state.first_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingDivergence("non-finite gradient", state.step_count + 1)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Owns the moments for a fixed parameter list."""

    def __init__(self, params: Sequence[np.ndarray], lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(
            [np.zeros_like(p) for p in self.params],
            [np.zeros_like(p) for p in self.params],
            0, lr, beta1, beta2, eps,
        )

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.state, self.params, grads)
