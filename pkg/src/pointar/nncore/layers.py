"""Transformer building blocks on top of the autodiff core.

Parameters live in a flat ParameterSet under dotted prefixes
("extractor.block0.attn.wq"), which keeps checkpoint layouts and
iteration order deterministic.
"""
from __future__ import annotations

import math

import numpy as np

from pointar.nncore import tensor as T
from pointar.nncore.tensor import ParameterSet, Tensor, as_tensor

__all__ = [
    "trunc_normal",
    "init_linear",
    "init_attention_params",
    "init_block_params",
    "linear",
    "mlp",
    "validate_mask",
    "masked_self_attention",
    "transformer_block",
    "dropout",
]

BLOCKED_LOGIT = -1e9  # additive penalty standing in for -inf; keeps softmax NaN-free
MLP_HIDDEN_RATIO = 4


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples re-drawn until they fall within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_linear(
    ps: ParameterSet,
    prefix: str,
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    dtype=np.float64,
) -> None:
    ps.add(f"{prefix}.w", trunc_normal(rng, (fan_in, fan_out)).astype(dtype))
    ps.add(f"{prefix}.b", np.zeros(fan_out, dtype=dtype))


def init_attention_params(
    ps: ParameterSet, prefix: str, dim: int, rng: np.random.Generator, dtype=np.float64
) -> None:
    # q/k/v projections carry no bias: a key bias shifts every logit in a
    # row equally, so softmax ignores it (a dead parameter); q/v biases are
    # dropped with it per common decoder practice.
    for proj in ("wq", "wk", "wv"):
        ps.add(f"{prefix}.{proj}.w", trunc_normal(rng, (dim, dim)).astype(dtype))
    init_linear(ps, f"{prefix}.wo", dim, dim, rng, dtype)


def init_block_params(
    ps: ParameterSet, prefix: str, dim: int, rng: np.random.Generator, dtype=np.float64
) -> None:
    ps.add(f"{prefix}.ln1.g", np.ones(dim, dtype=dtype))
    ps.add(f"{prefix}.ln1.b", np.zeros(dim, dtype=dtype))
    init_attention_params(ps, f"{prefix}.attn", dim, rng, dtype)
    ps.add(f"{prefix}.ln2.g", np.ones(dim, dtype=dtype))
    ps.add(f"{prefix}.ln2.b", np.zeros(dim, dtype=dtype))
    hidden = MLP_HIDDEN_RATIO * dim
    init_linear(ps, f"{prefix}.mlp.fc1", dim, hidden, rng, dtype)
    init_linear(ps, f"{prefix}.mlp.fc2", hidden, dim, rng, dtype)


def linear(x: Tensor, ps: ParameterSet, prefix: str) -> Tensor:
    return T.affine(x, ps[f"{prefix}.w"], ps[f"{prefix}.b"])


def mlp(x: Tensor, ps: ParameterSet, prefix: str, activation=T.gelu) -> Tensor:
    return linear(activation(linear(x, ps, f"{prefix}.fc1")), ps, f"{prefix}.fc2")


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check a binary attention mask: 1 = attend, 0 = blocked, rows nonempty."""
    m = np.asarray(mask)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"attention mask must be (..., n, n), got {m.shape}")
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("attention mask entries must be 0 or 1")
    if (m.sum(axis=-1) < 1).any():
        raise ValueError("attention mask has a row with no attendable positions")
    return m.astype(np.float64)


def masked_self_attention(
    x: Tensor, mask: np.ndarray, heads: int, ps: ParameterSet, prefix: str
) -> Tensor:
    """Multi-head self-attention over (..., n, D) tokens.

    Per head, logits are Q Kᵀ / sqrt(D/heads); blocked positions receive
    an additive -1e9 before the row softmax, which drives their weight to
    exact zero in float64. ``mask`` is (n, n) or (batch, n, n).
    """
    n, dim = x.shape[-2], x.shape[-1]
    if dim % heads != 0:
        raise ValueError(f"channels {dim} not divisible by heads {heads}")
    head_dim = dim // heads
    m = validate_mask(mask)
    if m.shape[-1] != n:
        raise ValueError(f"mask size {m.shape[-1]} does not match {n} tokens")
    additive = (m - 1.0) * -BLOCKED_LOGIT  # 0 where attended, -1e9 where blocked
    if m.ndim == 3:
        additive = additive[:, None, :, :]  # broadcast over heads

    def split_heads(t: Tensor) -> Tensor:
        t = T.reshape(t, t.shape[:-1] + (heads, head_dim))
        return T.swapaxes(t, -3, -2)

    q = split_heads(T.matmul(x, ps[f"{prefix}.wq.w"]))
    k = split_heads(T.matmul(x, ps[f"{prefix}.wk.w"]))
    v = split_heads(T.matmul(x, ps[f"{prefix}.wv.w"]))

    logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(head_dim))
    weights = T.softmax(logits + as_tensor(additive.astype(x.dtype)), axis=-1)
    mixed = T.swapaxes(T.matmul(weights, v), -3, -2)
    mixed = T.reshape(mixed, mixed.shape[:-2] + (dim,))
    return linear(mixed, ps, f"{prefix}.wo")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p = 0 is the identity and draws nothing from rng."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * as_tensor(keep)


def transformer_block(
    x: Tensor,
    pos: np.ndarray | Tensor,
    mask: np.ndarray,
    heads: int,
    ps: ParameterSet,
    prefix: str,
    drop_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block: h = x + pos; h += Attn(LN(h)); h += MLP(LN(h))."""
    h = x + as_tensor(pos)
    attended = masked_self_attention(
        T.layer_norm(h, ps[f"{prefix}.ln1.g"], ps[f"{prefix}.ln1.b"]),
        mask,
        heads,
        ps,
        f"{prefix}.attn",
    )
    if drop_p > 0.0:
        attended = dropout(attended, drop_p, rng)
    h = h + attended
    expanded = mlp(
        T.layer_norm(h, ps[f"{prefix}.ln2.g"], ps[f"{prefix}.ln2.b"]), ps, f"{prefix}.mlp"
    )
    if drop_p > 0.0:
        expanded = dropout(expanded, drop_p, rng)
    return h + expanded
