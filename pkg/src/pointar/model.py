"""Extractor-generator decoder with dual masking.

The extractor is a causal transformer stack whose latents survive into
downstream tasks; during pre-training each row additionally drops a
random fraction of its attendable prefix. The generator is a shorter
stack that consumes the first n-1 latents plus direction prompts and
feeds a coordinate prediction head. A pooled classification head serves
the supervised stages.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from pointar.nncore import tensor as T
from pointar.nncore.layers import (
    init_block_params,
    init_linear,
    linear,
    transformer_block,
)
from pointar.nncore.tensor import ParameterSet, Tensor
from pointar.sequencer import SequencerConfig, init_embed_params

__all__ = [
    "ModelConfig",
    "DualMask",
    "causal_mask",
    "build_dual_mask",
    "init_model_params",
    "extractor_forward",
    "generator_forward",
    "predict_patches",
    "classification_head",
    "pooled_features",
    "desk_model_config",
    "paper_model_config",
]

MODES = ("pretrain", "finetune", "inference")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and masking knobs.

    ``dual_mask_ratio`` is the fraction of each token's attendable prefix
    that gets additionally masked during pre-training; 0 reproduces the
    vanilla causal mask. In finetune/inference mode the extra masking is
    always dropped.
    """

    channels: int = 96
    heads: int = 4
    extractor_depth: int = 4
    generator_depth: int = 4
    dual_mask_ratio: float = 0.7
    points_per_patch: int = 32
    num_classes: int = 5
    mode: str = "pretrain"
    dropout: float = 0.0

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError("channels must be divisible by heads")
        if not 0.0 <= self.dual_mask_ratio < 1.0:
            raise ValueError("dual_mask_ratio must lie in [0, 1)")
        if self.generator_depth < 0 or self.extractor_depth < 0:
            raise ValueError("depths must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, mode=mode)


def desk_model_config(**overrides) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    return ModelConfig(**overrides)


def paper_model_config(**overrides) -> ModelConfig:
    """ViT-S-sized extractor: 384 channels, 6 heads, 12 blocks."""
    base = dict(channels=384, heads=6, extractor_depth=12, generator_depth=4)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class DualMask:
    """Causal mask with extra random prefix masking.

    Row i keeps its diagonal, drops floor(ratio * i) of its i preceding
    positions (chosen uniformly without replacement), and therefore holds
    exactly i - floor(ratio * i) + 1 ones.
    """

    matrix: np.ndarray
    ratio: float
    seed: int


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def build_dual_mask(n: int, ratio: float, rng: np.random.Generator) -> DualMask:
    """Draw a fresh dual mask; ratio = 0 reproduces the causal mask."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    seed = int(rng.integers(0, 2**63 - 1))
    child = np.random.default_rng(seed)
    matrix = causal_mask(n)
    for i in range(1, n):
        drop = int(np.floor(ratio * i))
        if drop:
            blocked = child.choice(i, size=drop, replace=False)
            matrix[i, blocked] = 0.0
    return DualMask(matrix=matrix, ratio=ratio, seed=seed)


def init_model_params(
    model_cfg: ModelConfig,
    seq_cfg: SequencerConfig,
    rng: np.random.Generator,
    dtype=np.float64,
) -> ParameterSet:
    """All trainable tensors: embedder, extractor, generator, both heads."""
    if model_cfg.channels != seq_cfg.channels:
        raise ValueError("model and sequencer disagree on channel width")
    dim = model_cfg.channels
    ps = ParameterSet()
    init_embed_params(ps, dim, rng, dtype)
    for i in range(model_cfg.extractor_depth):
        init_block_params(ps, f"extractor.block{i}", dim, rng, dtype)
    for i in range(model_cfg.generator_depth):
        init_block_params(ps, f"generator.block{i}", dim, rng, dtype)
    k = model_cfg.points_per_patch
    init_linear(ps, "pred.fc1", dim, 4 * dim, rng, dtype)
    init_linear(ps, "pred.fc2", 4 * dim, 3 * k, rng, dtype)
    init_linear(ps, "cls.fc1", 2 * dim, dim, rng, dtype)
    init_linear(ps, "cls.fc2", dim, model_cfg.num_classes, rng, dtype)
    return ps


def _resolve_mask(mask, n: int, cfg: ModelConfig) -> np.ndarray:
    if cfg.mode in ("finetune", "inference"):
        return causal_mask(n)
    if mask is None:
        raise ValueError("pretrain mode requires an explicit mask")
    if isinstance(mask, DualMask):
        return mask.matrix
    return np.asarray(mask)


def extractor_forward(
    tokens: Tensor,
    ape: np.ndarray,
    mask,
    ps: ParameterSet,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the extractor stack; APE is re-added at every block input.

    In finetune/inference mode the supplied mask is ignored and the plain
    causal mask is used. ``mask`` may be a DualMask, an (n, n) array, or a
    (batch, n, n) array of per-item masks.
    """
    n = tokens.shape[-2]
    m = _resolve_mask(mask, n, cfg)
    x = tokens
    for i in range(cfg.extractor_depth):
        x = transformer_block(
            x, ape, m, cfg.heads, ps, f"extractor.block{i}", cfg.dropout, rng
        )
    return x


def generator_forward(
    latents_prefix: Tensor,
    rdp: np.ndarray,
    ps: ParameterSet,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the generator over the first n-1 latents with direction prompts.

    The prompts play the positional role here and are re-added at every
    block; masking is plain causal. Depth 0 passes latents straight
    through.
    """
    n_prev = latents_prefix.shape[-2]
    m = causal_mask(n_prev)
    x = latents_prefix
    for i in range(cfg.generator_depth):
        x = transformer_block(
            x, rdp, m, cfg.heads, ps, f"generator.block{i}", cfg.dropout, rng
        )
    return x


def predict_patches(generated: Tensor, ps: ParameterSet, points_per_patch: int) -> Tensor:
    """Project generated tokens to (..., n-1, k, 3) coordinate patches.

    Predictions are center-relative, matching the normalized targets.
    """
    hidden = T.relu(linear(generated, ps, "pred.fc1"))
    flat = linear(hidden, ps, "pred.fc2")
    return T.reshape(flat, flat.shape[:-1] + (points_per_patch, 3))


def pooled_features(latents: Tensor) -> Tensor:
    """Concatenated channel-wise max-pool and mean-pool over tokens."""
    return T.concat([latents.max(axis=-2), latents.mean(axis=-2)], axis=-1)


def classification_head(latents: Tensor, ps: ParameterSet) -> Tensor:
    """Pool latents (order-invariant) and project to class logits."""
    hidden = T.relu(linear(pooled_features(latents), ps, "cls.fc1"))
    return linear(hidden, ps, "cls.fc2")
