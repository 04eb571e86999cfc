from . import autodiff
from .autodiff import Tensor
from .layers import MLP, Linear, Module, SetEncoder, set_encode
from .optim import Adam, AdamHyper, AdamState, adam_step

__all__ = [
    "autodiff",
    "Tensor",
    "MLP",
    "Linear",
    "Module",
    "SetEncoder",
    "set_encode",
    "Adam",
    "AdamHyper",
    "AdamState",
    "adam_step",
]
