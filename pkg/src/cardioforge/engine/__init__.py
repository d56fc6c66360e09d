"""Minimal float64 reverse-mode tensor engine."""
from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import BatchNorm1d, Conv1d, ConvTranspose1d, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Adam", "AdamState", "BatchNorm1d", "Conv1d", "ConvTranspose1d", "Linear", "Module",
    "Tensor", "adam_step", "backward", "functional", "load_checkpoint", "no_grad", "save_checkpoint",
]
