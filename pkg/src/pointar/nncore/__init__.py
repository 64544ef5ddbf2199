"""Minimal differentiable compute core.

numpy holds the storage and does the matmuls; the reverse-mode engine,
transformer building blocks, optimizer, and schedule are implemented here
from scratch so every gradient can be audited against finite differences.
"""
from pointar.nncore.tensor import (
    Tensor,
    ParameterSet,
    as_tensor,
    backward,
    concat,
    gelu,
    layer_norm,
    matmul,
    relu,
    softmax,
)
from pointar.nncore.layers import (
    dropout,
    init_attention_params,
    init_block_params,
    init_linear,
    linear,
    masked_self_attention,
    mlp,
    transformer_block,
    trunc_normal,
    validate_mask,
)
from pointar.nncore.optim import (
    LRSchedule,
    OptimizerState,
    adamw_step,
    clip_global_norm,
    cosine_lr,
)

__all__ = [
    "Tensor",
    "ParameterSet",
    "as_tensor",
    "backward",
    "concat",
    "gelu",
    "layer_norm",
    "matmul",
    "relu",
    "softmax",
    "dropout",
    "init_attention_params",
    "init_block_params",
    "init_linear",
    "linear",
    "masked_self_attention",
    "mlp",
    "transformer_block",
    "trunc_normal",
    "validate_mask",
    "LRSchedule",
    "OptimizerState",
    "adamw_step",
    "clip_global_norm",
    "cosine_lr",
]
