from .adam import AdamState, adam_step
from .nn import ACTIVATIONS, Layer, Mlp, init_mlp, load_mlp, mlp_apply, save_mlp
from .rng import stream_rng
from .tensor import NonFiniteError, Tensor, concat, mod1, reverse_grad

__all__ = [
    "ACTIVATIONS",
    "AdamState",
    "Layer",
    "Mlp",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "concat",
    "init_mlp",
    "load_mlp",
    "mlp_apply",
    "mod1",
    "reverse_grad",
    "save_mlp",
    "stream_rng",
]
