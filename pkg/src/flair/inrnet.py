"""Coordinate MLP: lifted input, activated hidden layers, affine head."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationSpec, Kind, init_linear, learnable_mask
from .tensorgraph import DimensionError, Tape

MAGIC = b"FLR1"
FORMAT_VERSION = 1
_KIND_CODES = {None: 0, Kind.RC_GAUSS: 1, Kind.SINE: 2, Kind.FINER: 3, Kind.GAUSSIAN: 4,
               Kind.RELU_PE: 5, Kind.RAISED_COSINE: 6, Kind.SINC: 7}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def positional_encode(coords: np.ndarray, pe_bands: int) -> np.ndarray:
    """Per axis: ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(B-1) pi x), cos(2^(B-1) pi x)]``."""
    if pe_bands < 1:
        raise ValueError("pe_bands must be >= 1")
    coords = np.asarray(coords)
    if coords.ndim == 1:
        coords = coords[:, None]
    n, d = coords.shape
    freqs = (2.0 ** np.arange(pe_bands)) * math.pi
    out = np.empty((n, d, 1 + 2 * pe_bands), dtype=coords.dtype)
    out[:, :, 0] = coords
    ang = coords[:, :, None] * freqs.astype(coords.dtype)
    out[:, :, 1::2] = np.sin(ang)
    out[:, :, 2::2] = np.cos(ang)
    return out.reshape(n, d * (1 + 2 * pe_bands))


@dataclass
class Layer:
    weight: np.ndarray                 # (fan_in, fan_out)
    bias: np.ndarray                   # (1, fan_out)
    spec: ActivationSpec | None        # None marks the affine head
    theta: np.ndarray | None = None    # (1, 3): T, sigma, zeta; band-limited kinds only

    @property
    def activation(self) -> ActivationSpec | None:
        if self.spec is None or self.theta is None:
            return self.spec
        return self.spec.with_theta(self.theta)


@dataclass
class InrModel:
    layers: list[Layer]
    input_dim: int
    output_dim: int
    pe_bands: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def hidden_kind(self) -> Kind | None:
        return self.layers[0].spec.kind if self.layers[0].spec is not None else None

    def encoded_dim(self) -> int:
        return self.input_dim * (1 + 2 * self.pe_bands) if self.pe_bands else self.input_dim

    def parameters(self) -> list[np.ndarray]:
        """Arrays the optimizer updates (beta and omega0 are never among them)."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
            if layer.theta is not None:
                out.append(layer.theta)
        return out

    def parameter_count(self) -> int:
        n = 0
        for layer in self.layers:
            n += layer.weight.size + layer.bias.size
            if layer.theta is not None:
                n += sum(learnable_mask(layer.spec.kind))
        return n

    def learned_params(self) -> list[dict]:
        rows = []
        for i, layer in enumerate(self.layers):
            if layer.theta is not None:
                T, sigma, zeta = (float(v) for v in layer.theta[0])
                rows.append({"layer": i + 1, "T": T, "sigma": sigma, "zeta": zeta})
        return rows

    # -- evaluation -------------------------------------------------------
    def encode(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=self.dtype)
        if coords.ndim != 2 or coords.shape[1] != self.input_dim:
            raise DimensionError(
                f"model expects coordinates of width {self.input_dim}, got shape {coords.shape}"
            )
        return positional_encode(coords, self.pe_bands) if self.pe_bands else coords

    def build_tape(self, with_loss: bool = False, loss: str = "mse") -> "Graph":
        tape = Tape(dtype=self.dtype)
        x = tape.input(self.encoded_dim(), name="coords")
        h = x
        hidden = []
        for i, layer in enumerate(self.layers):
            w = tape.param(layer.weight, name=f"W{i + 1}")
            b = tape.param(layer.bias, name=f"b{i + 1}")
            h = tape.add_bias(tape.matmul(h, w), b)
            if layer.spec is not None:
                th = tape.param(layer.theta, name=f"theta{i + 1}") if layer.theta is not None else None
                h = tape.activation(h, layer.spec, th, name=f"act{i + 1}")
                hidden.append(h)
        graph = Graph(tape, x, h, hidden)
        if with_loss:
            graph.target = tape.input(self.output_dim, name="target")
            if loss == "mse":
                graph.loss = tape.mse(h, graph.target, name="loss")
            elif loss == "bce":
                graph.loss = tape.bce_logits(h, graph.target, name="loss")
            else:
                raise ValueError(f"unknown loss {loss!r}")
        return graph

    def predict(self, coords: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Batched forward pass; safe to call concurrently on a frozen model."""
        enc = self.encode(coords)
        graph = self.build_tape()
        if enc.shape[0] <= chunk:
            return graph.tape.forward([enc], until=graph.output, record=False)
        parts = [graph.tape.forward([enc[i:i + chunk]], until=graph.output, record=False)
                 for i in range(0, enc.shape[0], chunk)]
        return np.concatenate(parts, axis=0)

    def hidden_response(self, coords: np.ndarray, layer: int = 1) -> np.ndarray:
        """Post-activation outputs of hidden layer ``layer`` (1-based)."""
        graph = self.build_tape()
        if not 1 <= layer <= len(graph.hidden):
            raise ValueError(f"layer must be in 1..{len(graph.hidden)}")
        return graph.tape.forward([self.encode(coords)], until=graph.hidden[layer - 1], record=False)

    # -- serialization ----------------------------------------------------
    def to_bytes(self) -> bytes:
        """FLR1 container, all little-endian.

        ``b"FLR1"``, u32 x 6 (version, layers, input_dim, output_dim, pe_bands,
        training precision bits), then per layer: u32 x 3 (fan_in, fan_out,
        activation code, 0 for the head), f64 weights (row-major) and bias,
        f64 x 5 (beta, omega0, T, sigma, zeta), u32 learnable-theta flag.
        """
        bits = 32 if self.dtype == np.float32 else 64
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<6I", FORMAT_VERSION, len(self.layers), self.input_dim,
                              self.output_dim, self.pe_bands, bits))
        for layer in self.layers:
            fan_in, fan_out = layer.weight.shape
            kind = layer.spec.kind if layer.spec is not None else None
            buf.write(struct.pack("<3I", fan_in, fan_out, _KIND_CODES[kind]))
            buf.write(layer.weight.astype("<f8").tobytes())
            buf.write(layer.bias.astype("<f8").tobytes())
            spec = layer.activation
            scalars = (spec.beta, spec.omega0, spec.T, spec.sigma, spec.zeta) if spec else (0.0,) * 5
            buf.write(struct.pack("<5d", *scalars))
            buf.write(struct.pack("<I", int(layer.theta is not None)))
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "InrModel":
        if data[:4] != MAGIC:
            raise ValueError("not a FLR1 model file")
        off = 4
        version, n_layers, input_dim, output_dim, pe_bands, bits = struct.unpack_from("<6I", data, off)
        off += 24
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        dtype = np.float32 if bits == 32 else np.float64
        layers = []
        for _ in range(n_layers):
            fan_in, fan_out, code = struct.unpack_from("<3I", data, off)
            off += 12
            W = np.frombuffer(data, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out).astype(dtype)
            off += 8 * fan_in * fan_out
            b = np.frombuffer(data, "<f8", fan_out, off).reshape(1, fan_out).astype(dtype)
            off += 8 * fan_out
            beta, omega0, T, sigma, zeta = struct.unpack_from("<5d", data, off)
            off += 40
            (has_theta,) = struct.unpack_from("<I", data, off)
            off += 4
            kind = _CODE_KINDS[code]
            spec = None if kind is None else ActivationSpec(kind, T, sigma, zeta, beta, omega0)
            theta = np.array([[T, sigma, zeta]], dtype=dtype) if has_theta else None
            layers.append(Layer(W, b, spec, theta))
        return cls(layers, input_dim, output_dim, pe_bands)

    @classmethod
    def load(cls, path) -> "InrModel":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class Graph:
    tape: Tape
    coords: int
    output: int
    hidden: list[int]
    target: int | None = None
    loss: int | None = None


def build_model(input_dim: int, output_dim: int, activation: ActivationSpec,
                hidden_layers: int = 4, hidden_width: int = 256, pe_bands: int = 0,
                seed: int | np.random.Generator = 0, dtype=np.float64) -> InrModel:
    """Randomly initialised model; every hidden layer starts from ``activation``."""
    if hidden_layers < 1 or hidden_width < 1:
        raise ValueError("need at least one hidden layer of positive width")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    enc_dim = input_dim * (1 + 2 * pe_bands) if pe_bands else input_dim
    layers = []
    fan_in = enc_dim
    for i in range(hidden_layers):
        W, b = init_linear(rng, fan_in, hidden_width, activation, first=(i == 0), dtype=dtype)
        theta = np.array([activation.theta], dtype=dtype) if activation.band_limited else None
        layers.append(Layer(W, b, activation, theta))
        fan_in = hidden_width
    W, b = init_linear(rng, fan_in, output_dim, None, first=False, hidden_kind=activation.kind, dtype=dtype)
    layers.append(Layer(W, b, None))
    return InrModel(layers, input_dim, output_dim, pe_bands)


def predict(model: InrModel, coords: np.ndarray) -> np.ndarray:
    return model.predict(coords)
