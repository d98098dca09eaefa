"""Small fully connected networks on top of the autodiff tensor.

Checkpoint format (binary, little-endian): magic ``FLB1``, u32 layer count,
then per layer u32 rows, u32 cols, u8 activation tag and the raw float64
weight matrix (row-major) followed by the bias vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

ACTIVATIONS = ("linear", "silu", "tanh")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

MAGIC = b"FLB1"


@dataclass
class Layer:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor  # (out_dim,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")


@dataclass
class Mlp:
    layers: list

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias


def init_mlp(dims, rng: np.random.Generator, hidden_activation: str = "silu",
             final_activation: str = "linear") -> Mlp:
    """He-style initialization; dims chains input through hidden to output."""
    layers = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((din, dout)) / np.sqrt(din)
        b = np.zeros(dout)
        act = final_activation if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), act))
    return Mlp(layers)


def mlp_apply(m: Mlp, x) -> Tensor:
    """Forward pass; accepts (input_dim,) or batched (n, input_dim)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[-1] != m.input_dim:
        raise ValueError(f"input dim {h.shape[-1]} does not match model dim {m.input_dim}")
    for layer in m.layers:
        h = h @ layer.weight + layer.bias
        if layer.activation == "silu":
            h = h.silu()
        elif layer.activation == "tanh":
            h = h.tanh()
    return h


def save_mlp(path, m: Mlp):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(m.layers)))
        for layer in m.layers:
            rows, cols = layer.weight.shape
            f.write(struct.pack("<IIB", rows, cols, _ACT_TAG[layer.activation]))
            f.write(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        layers = []
        for _ in range(n_layers):
            rows, cols, tag = struct.unpack("<IIB", f.read(9))
            w = np.frombuffer(f.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(f.read(cols * 8), dtype="<f8")
            layers.append(Layer(Tensor(w.copy(), requires_grad=True),
                                Tensor(b.copy(), requires_grad=True),
                                ACTIVATIONS[tag]))
    return Mlp(layers)
