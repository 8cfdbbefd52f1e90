"""Differentiable float64 primitives with analytic gradients."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import analytic_gradients, grad_check, relative_error
from .layers import (
    MaskError,
    Params,
    ShapeError,
    affine,
    block,
    cross_attention,
    gru_step,
    init_affine,
    init_attention,
    init_gru,
    init_layer_norm,
    init_mlp2,
    layer_norm,
    masked_self_attention,
    max_pool,
    mlp2,
)
from .optim import AdamState, NonFiniteGradient, adam_step
from .tensor import Var, backward, param

__all__ = [
    "AdamState",
    "CheckpointError",
    "MaskError",
    "NonFiniteGradient",
    "Params",
    "ShapeError",
    "Var",
    "adam_step",
    "affine",
    "analytic_gradients",
    "backward",
    "block",
    "cross_attention",
    "grad_check",
    "gru_step",
    "init_affine",
    "init_attention",
    "init_gru",
    "init_layer_norm",
    "init_mlp2",
    "layer_norm",
    "load_checkpoint",
    "masked_self_attention",
    "max_pool",
    "mlp2",
    "param",
    "relative_error",
    "save_checkpoint",
]
