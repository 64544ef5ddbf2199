"""Chamfer-distance objectives and the supervised losses.

The nearest-neighbor witnesses are found outside the autodiff graph with
first-occurrence argmin (deterministic subgradients at ties); the loss
itself is then rebuilt from differentiable gathers, so gradients flow to
both point sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pointar.nncore import tensor as T
from pointar.nncore.tensor import Tensor, as_tensor

__all__ = [
    "chamfer",
    "generation_loss",
    "finetune_loss",
    "cross_entropy",
    "LossReport",
]


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components for logging; total already includes lambda."""

    cd_l1: float
    cd_l2: float
    generation: float
    downstream: float
    total: float
    lam: float

    @classmethod
    def for_pretrain(cls, cd1: float, cd2: float) -> "LossReport":
        return cls(cd1, cd2, cd1 + cd2, 0.0, cd1 + cd2, 0.0)

    @classmethod
    def for_finetune(cls, ce: float, cd1: float, cd2: float, lam: float) -> "LossReport":
        gen = cd1 + cd2
        return cls(cd1, cd2, gen, ce, ce + lam * gen, lam)


def _gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of (..., m, 3) by (..., r) indices -> (..., r, 3)."""
    lead = idx.shape[:-1]
    if lead:
        grids = np.meshgrid(*[np.arange(s) for s in lead], indexing="ij")
        key = tuple(g[..., None] for g in grids) + (idx,)
    else:
        key = (idx,)
    return T.take(t, key)


def _pair_distances(a: np.ndarray, b: np.ndarray, form: int) -> np.ndarray:
    """All-pairs distances, used only for witness (argmin) selection."""
    if form == 1:
        diff = a[..., :, None, :] - b[..., None, :, :]
        return np.abs(diff).sum(axis=-1)
    # squared euclidean via the quadratic expansion; avoids the
    # (..., ka, kb, 3) intermediate
    sq_a = (a * a).sum(axis=-1)
    sq_b = (b * b).sum(axis=-1)
    cross = np.matmul(a, np.swapaxes(b, -1, -2))
    return sq_a[..., :, None] + sq_b[..., None, :] - 2.0 * cross


def _directed_term(src: Tensor, dst: Tensor, witnesses: np.ndarray, form: int) -> Tensor:
    """Mean over src points of the distance to their chosen dst witness."""
    matched = _gather_rows(dst, witnesses)
    diff = src - matched
    if form == 1:
        per_point = T.absolute(diff).sum(axis=-1)
    else:
        per_point = (diff * diff).sum(axis=-1)
    return per_point.mean(axis=-1)


def _chamfer_terms(a: Tensor, b: Tensor, form: int) -> Tensor:
    d = _pair_distances(a.data, b.data, form)
    to_b = np.argmin(d, axis=-1)  # witness in b for each a point
    to_a = np.argmin(d, axis=-2)  # witness in a for each b point
    return _directed_term(a, b, to_b, form) + _directed_term(b, a, to_a, form)


def chamfer(a, b, form: int) -> Tensor:
    """Symmetric Chamfer discrepancy between two 3-D point sets.

    ``form`` 1 uses L1 distances, form 2 squared Euclidean; each directed
    sum is averaged over its own set. Ties in the nearest-neighbor search
    go to the lower index.
    """
    if form not in (1, 2):
        raise ValueError(f"form must be 1 or 2, got {form}")
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError("chamfer expects (ka, 3) and (kb, 3) point sets")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer requires nonempty point sets")
    return _chamfer_terms(a, b, form)


def generation_loss(predicted, targets) -> tuple[Tensor, Tensor, Tensor]:
    """Mean over patch pairs of (Chamfer form 1 + Chamfer form 2).

    Accepts (..., n', k, 3) stacks; all leading axes are averaged.
    Returns (total, cd1_mean, cd2_mean).
    """
    pred, tgt = as_tensor(predicted), as_tensor(targets)
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {tgt.shape}")
    if pred.ndim < 3 or pred.shape[-1] != 3:
        raise ValueError("expected (..., n_patches, k, 3) stacks")
    cd1 = _chamfer_terms(pred, tgt, 1).mean()
    cd2 = _chamfer_terms(pred, tgt, 2).mean()
    return cd1 + cd2, cd1, cd2


def finetune_loss(downstream, generation, lam: float) -> Tensor:
    """Combined objective: downstream + lambda * generation."""
    if lam < 0.0:
        raise ValueError("lambda must be nonnegative")
    return as_tensor(downstream) + lam * as_tensor(generation)


def cross_entropy(logits, labels) -> Tensor:
    """Softmax cross-entropy, averaged over any batch dimension.

    ``logits`` is (C,) or (batch, C); ``labels`` an int or (batch,) ints.
    """
    lg = as_tensor(logits)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    squeeze = lg.ndim == 1
    if squeeze:
        lg = T.reshape(lg, (1, lg.shape[0]))
    if lg.ndim != 2 or lab.shape != (lg.shape[0],):
        raise ValueError("logits/labels shapes do not align")
    n_classes = lg.shape[-1]
    if (lab < 0).any() or (lab >= n_classes).any():
        raise ValueError(f"label index outside [0, {n_classes})")
    shift = as_tensor(lg.data.max(axis=-1, keepdims=True))  # constant for stability
    z = lg - shift
    lse = T.log(T.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse.broadcast_to(z.shape)
    picked = T.take(logp, (np.arange(lab.shape[0]), lab))
    return -picked.mean()
