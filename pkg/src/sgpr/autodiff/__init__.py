"""Minimal reverse-mode autodiff over numpy float64 arrays."""

from . import ops
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, backward

__all__ = ["Adam", "AdamState", "Tape", "Tensor", "adam_step", "as_tensor", "backward", "ops"]
