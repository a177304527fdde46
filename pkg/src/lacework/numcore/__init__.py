"""Differentiable-computation substrate: tensors are numpy float32 arrays,
models are `Mlp`s, randomness flows through `SeededRng`."""

from . import autodiff
from .nets import Mlp, param_count
from .rng import SeededRng

__all__ = ["autodiff", "Mlp", "param_count", "SeededRng"]
