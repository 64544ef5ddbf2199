"""Deterministic geometric kernels: farthest point sampling, k-nearest
neighbors, Morton (Z-order) encoding, spatial sorting, and patch
normalization.

Everything here is brute force on purpose: clouds stay small (a few
thousand points at most), so O(n*M) scans beat any acceleration structure
and keep results exactly reproducible. All operations are pure functions
of their inputs, and every tie is broken toward the lowest original index.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "fps",
    "knn",
    "morton_encode",
    "sort_by_morton",
    "normalize_patches",
]

MAX_BITS_PER_AXIS = 21  # 3 * 21 = 63 interleaved bits fit an int64


def _as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (M, 3) point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def fps(points, n: int, seed_index: int = 0):
    """Greedy farthest point sampling.

    Starts at ``points[seed_index]`` and repeatedly picks the point whose
    minimum distance to all already-selected points is largest (ties go to
    the lowest index). Returns ``(centers, indices)`` with shapes (n, 3)
    and (n,). The length-m prefix of the result equals an fps run with
    ``n = m``.
    """
    pts = _as_cloud(points)
    m = pts.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"n must be in [1, {m}], got {n}")
    if not 0 <= seed_index < m:
        raise ValueError(f"seed_index must be in [0, {m}), got {seed_index}")

    indices = np.empty(n, dtype=np.int64)
    indices[0] = seed_index
    # Squared distances preserve the argmax and avoid m sqrt calls per step.
    min_d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    min_d2[seed_index] = -np.inf  # selected points can never be re-picked
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        indices[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
        min_d2[nxt] = -np.inf
    return pts[indices].copy(), indices


def knn(centers, points, k: int):
    """For each center, gather its k nearest cloud points.

    Rows of each patch are ordered by nondecreasing distance to the
    center, ties toward the lower source index. Returns
    ``(patches, indices)`` with shapes (n, k, 3) and (n, k).
    """
    pts = _as_cloud(points)
    ctr = _as_cloud(centers)
    m = pts.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    d2 = np.sum((ctr[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    # Stable argsort keeps equal distances in index order.
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return pts[idx], idx


def _spread_bits(cells: np.ndarray) -> np.ndarray:
    """Space the low 21 bits of each value three apart (x -> x00x00...)."""
    v = cells.astype(np.uint64)
    v &= np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_encode(coords, lo, hi, bits_per_axis: int = MAX_BITS_PER_AXIS):
    """Morton (Z-order) code of 3-D coordinates within a bounding box.

    Each axis is affinely mapped onto integer cells in
    ``[0, 2**bits_per_axis - 1]`` (floor quantization, clamped at both
    ends; an axis with zero extent quantizes to cell 0), and the three
    cell integers are bit-interleaved from the least-significant bit
    upward with x lowest: bit b of x lands at position 3b, y at 3b + 1,
    z at 3b + 2.

    ``coords`` may be a single 3-vector or an (..., 3) array; the result
    is a uint64 scalar or matching array.
    """
    if not 1 <= bits_per_axis <= MAX_BITS_PER_AXIS:
        raise ValueError(f"bits_per_axis must be in [1, {MAX_BITS_PER_AXIS}]")
    c = np.asarray(coords, dtype=np.float64)
    scalar = c.ndim == 1
    c = np.atleast_2d(c)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    extent = hi - lo
    n_cells = 1 << bits_per_axis

    with np.errstate(divide="ignore", invalid="ignore"):
        unit = (c - lo) / extent
    unit = np.where(extent > 0.0, unit, 0.0)
    cells = np.floor(unit * n_cells)
    cells = np.clip(cells, 0, n_cells - 1).astype(np.uint64)

    code = (
        _spread_bits(cells[..., 0])
        | (_spread_bits(cells[..., 1]) << np.uint64(1))
        | (_spread_bits(cells[..., 2]) << np.uint64(2))
    )
    return code[0] if scalar else code


def sort_by_morton(centers, patches):
    """Stable ascending sort of (centers, patches) by Morton code.

    Codes are computed over the centers' own axis-aligned bounding box at
    21 bits per axis. Returns ``(order, sorted_centers, sorted_patches)``
    where ``order`` is the permutation applied to both arrays.
    """
    ctr = _as_cloud(centers)
    pat = np.asarray(patches, dtype=np.float64)
    if pat.ndim != 3 or pat.shape[0] != ctr.shape[0] or pat.shape[2] != 3:
        raise ValueError(
            f"patches must be (n, k, 3) with n matching centers, got {pat.shape}"
        )
    codes = morton_encode(ctr, ctr.min(axis=0), ctr.max(axis=0))
    order = np.argsort(codes, kind="stable")
    return order, ctr[order].copy(), pat[order].copy()


def normalize_patches(patches, centers) -> np.ndarray:
    """Express each patch relative to its center (row minus center)."""
    pat = np.asarray(patches, dtype=np.float64)
    ctr = np.asarray(centers, dtype=np.float64)
    if pat.shape[0] != ctr.shape[0]:
        raise ValueError("patches and centers disagree on patch count")
    return pat - ctr[:, None, :]
