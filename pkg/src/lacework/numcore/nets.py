"""MLP function approximators with flat float32 parameters.

A net owns one flat parameter vector plus adaptive-moment optimizer state.
`forward` is the fast inference path (plain numpy); `forward_graph` builds
the same computation as autodiff nodes for training. Both are deterministic
functions of (parameters, input).

Checkpoint layout: magic b"LWNC", u32 version, u32 layer count, u32 widths,
then the little-endian float32 parameter array. Optimizer state is not
serialized; checkpoints are inference-ready parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, TrainingDivergence
from . import autodiff as ad
from .rng import SeededRng

MAGIC = b"LWNC"
VERSION = 1

_ACTS = {
    "tanh": (np.tanh, ad.tanh),
    "relu": (lambda x: np.maximum(x, 0), ad.relu),
    "identity": (None, None),
}


def param_count(widths) -> int:
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))


class Mlp:
    """Fully-connected net: widths[0] inputs -> widths[-1] outputs."""

    def __init__(self, widths, rng: SeededRng | None = None,
                 hidden_activation: str = "tanh", output_activation: str = "identity",
                 params: np.ndarray | None = None, zero_last_layer: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ContractViolation(f"invalid layer widths {widths}")
        if hidden_activation not in _ACTS or output_activation not in _ACTS:
            raise ContractViolation("unknown activation")
        self.widths = widths
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        n = param_count(widths)
        if params is not None:
            params = np.asarray(params, dtype=np.float32)
            if params.shape != (n,):
                raise ContractViolation(f"expected {n} parameters, got {params.shape}")
            self.params = params.copy()
        else:
            if rng is None:
                raise ContractViolation("need rng or explicit params")
            self.params = self._init_params(rng)
        if zero_last_layer:
            w_sl, b_sl = self.layer_slices()[-1]
            self.params[w_sl] = 0.0
            self.params[b_sl] = 0.0
        # adaptive-moment state
        self.m = np.zeros(n, dtype=np.float32)
        self.v = np.zeros(n, dtype=np.float32)
        self.step_count = 0

    # -- parameter layout --------------------------------------------------

    def layer_slices(self):
        """[(weight_slice, bias_slice)] into the flat parameter vector."""
        out = []
        off = 0
        for i in range(len(self.widths) - 1):
            fi, fo = self.widths[i], self.widths[i + 1]
            out.append((slice(off, off + fi * fo), slice(off + fi * fo, off + fi * fo + fo)))
            off += fi * fo + fo
        return out

    def _init_params(self, rng: SeededRng) -> np.ndarray:
        # uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per layer
        parts = []
        for i in range(len(self.widths) - 1):
            fi, fo = self.widths[i], self.widths[i + 1]
            bound = 1.0 / np.sqrt(fi)
            parts.append(rng.uniform(-bound, bound, shape=(fi * fo,), dtype=np.float32))
            parts.append(rng.uniform(-bound, bound, shape=(fo,), dtype=np.float32))
        return np.concatenate(parts)

    def unpack(self, flat: np.ndarray):
        layers = []
        for i, (w_sl, b_sl) in enumerate(self.layer_slices()):
            fi, fo = self.widths[i], self.widths[i + 1]
            layers.append((flat[w_sl].reshape(fi, fo), flat[b_sl]))
        return layers

    # -- evaluation ----------------------------------------------------------

    def forward(self, x: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Fast inference; x is (batch, in) or (in,)."""
        flat = self.params if params is None else params
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x))
        if h.shape[-1] != self.widths[0]:
            raise ContractViolation(
                f"input width {h.shape[-1]} != expected {self.widths[0]}")
        hid_f, _ = _ACTS[self.hidden_activation]
        out_f, _ = _ACTS[self.output_activation]
        layers = self.unpack(flat)
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            f = out_f if i == len(layers) - 1 else hid_f
            if f is not None:
                h = f(h)
        return h[0] if squeeze else h

    def forward_graph(self, x: "ad.Node", params: "ad.Node") -> "ad.Node":
        """Same map as `forward`, built as autodiff nodes.

        Weight/bias views are taken from the params leaf via slicing nodes so
        gradients land back in one flat vector.
        """
        if x.value.ndim != 2 or x.value.shape[-1] != self.widths[0]:
            raise ContractViolation(
                f"input shape {x.value.shape} != (batch, {self.widths[0]})")
        _, hid_g = _ACTS[self.hidden_activation]
        _, out_g = _ACTS[self.output_activation]
        h = x
        slices = self.layer_slices()
        for i, (w_sl, b_sl) in enumerate(slices):
            fi, fo = self.widths[i], self.widths[i + 1]
            w = _slice_reshape(params, w_sl, (fi, fo))
            b = _slice_reshape(params, b_sl, (fo,))
            h = ad.affine(h, w, b)
            g = out_g if i == len(slices) - 1 else hid_g
            if g is not None:
                h = g(h)
        return h

    def param_leaf(self) -> "ad.Node":
        return ad.leaf(self.params)

    # -- optimization ----------------------------------------------------------

    def adam_step(self, gradient: np.ndarray, lr: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                  where: str = "adam_step") -> None:
        g = np.asarray(gradient, dtype=np.float32)
        if g.shape != self.params.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {self.params.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(where, "gradient contains non-finite entries")
        self.step_count += 1
        t = self.step_count
        self.m = beta1 * self.m + (1.0 - beta1) * g
        self.v = beta2 * self.v + (1.0 - beta2) * (g * g)
        m_hat = self.m / np.float32(1.0 - beta1 ** t)
        v_hat = self.v / np.float32(1.0 - beta2 ** t)
        self.params = self.params - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))

    def polyak_from(self, source: "Mlp", tau: float) -> None:
        """params <- (1 - tau) * params + tau * source.params (target update)."""
        t = np.float32(tau)
        self.params = (np.float32(1.0) - t) * self.params + t * source.params

    def copy(self) -> "Mlp":
        dup = Mlp(self.widths, params=self.params,
                  hidden_activation=self.hidden_activation,
                  output_activation=self.output_activation)
        dup.m = self.m.copy()
        dup.v = self.v.copy()
        dup.step_count = self.step_count
        return dup

    # -- checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(self.widths)))
            f.write(struct.pack(f"<{len(self.widths)}I", *self.widths))
            f.write(self.params.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, hidden_activation: str = "tanh",
             output_activation: str = "identity") -> "Mlp":
        path = Path(path)
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != MAGIC:
                raise ContractViolation(f"{path}: bad magic {magic!r}")
            (version,) = struct.unpack("<I", f.read(4))
            if version != VERSION:
                raise ContractViolation(f"{path}: unsupported version {version}")
            (n_widths,) = struct.unpack("<I", f.read(4))
            widths = struct.unpack(f"<{n_widths}I", f.read(4 * n_widths))
            params = np.frombuffer(f.read(), dtype="<f4").copy()
        return cls(list(widths), params=params,
                   hidden_activation=hidden_activation,
                   output_activation=output_activation)


def _slice_reshape(params: "ad.Node", sl: slice, shape) -> "ad.Node":
    view = params.value[sl].reshape(shape)

    def vjp(g, sl=sl, shape=shape):
        out = np.zeros_like(params.value)
        out[sl] = np.asarray(g).reshape(-1)
        return out

    return ad.Node(view, ((params, vjp),))
