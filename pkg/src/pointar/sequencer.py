"""From raw cloud to ordered token sequence.

The pipeline is fps -> knn -> Morton sort -> center-relative
normalization -> permutation-invariant embedding, plus two sinusoidal
encodings: absolute positions of the sorted centers and unit directions
between consecutive centers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pointar import geometry
from pointar.nncore import tensor as T
from pointar.nncore.layers import init_linear, linear
from pointar.nncore.tensor import ParameterSet, Tensor, as_tensor

__all__ = [
    "SequencerConfig",
    "TokenSequence",
    "init_embed_params",
    "embed_patches",
    "absolute_positional_encoding",
    "relative_direction_prompts",
    "sequence_geometry",
    "build_sequence",
]

PE_BASE = 10000.0


@dataclass(frozen=True)
class SequencerConfig:
    """Patching geometry and token width.

    Defaults follow the standard recipe: 1024-point clouds cut into 64
    patches of 32 points. ``channels`` must be divisible by 6 so the
    positional encoding splits into three axis bands of sin/cos pairs.
    """

    num_points: int = 1024
    num_patches: int = 64
    points_per_patch: int = 32
    channels: int = 96

    def __post_init__(self):
        if self.num_patches > self.num_points:
            raise ValueError("num_patches cannot exceed num_points")
        if self.points_per_patch > self.num_points:
            raise ValueError("points_per_patch cannot exceed num_points")
        if self.channels % 6 != 0:
            raise ValueError("channels must be divisible by 6")
        if min(self.num_points, self.num_patches, self.points_per_patch) < 1:
            raise ValueError("all sizes must be positive")


@dataclass
class TokenSequence:
    """Embedded, ordered patch sequence for one cloud.

    ``patches`` are center-relative; prediction targets are
    ``patches[1:]`` (everything after the first patch in Morton order).
    """

    tokens: Tensor  # (n, D)
    centers: np.ndarray  # (n, 3), sorted
    patches: np.ndarray  # (n, k, 3), center-relative
    ape: np.ndarray  # (n, D)
    rdp: np.ndarray  # (n - 1, D)
    order: np.ndarray  # permutation applied by the Morton sort

    @property
    def targets(self) -> np.ndarray:
        return self.patches[1:]


def init_embed_params(
    ps: ParameterSet, channels: int, rng: np.random.Generator, dtype=np.float64
) -> None:
    """Two-stage shared-point MLP: (3 -> D/2 -> D/2), pool+concat, (D -> D -> D)."""
    half = channels // 2
    init_linear(ps, "embed.s1.fc1", 3, half, rng, dtype)
    init_linear(ps, "embed.s1.fc2", half, half, rng, dtype)
    init_linear(ps, "embed.s2.fc1", channels, channels, rng, dtype)
    init_linear(ps, "embed.s2.fc2", channels, channels, rng, dtype)


def embed_patches(patches, ps: ParameterSet) -> Tensor:
    """Embed (..., k, 3) center-relative patches into (..., D) tokens.

    Channel-wise max-pooling makes the result exactly invariant to the
    order (and duplication) of points within a patch.
    """
    x = as_tensor(patches)
    feat = linear(x, ps, "embed.s1.fc1")
    feat = T.relu(feat)
    feat = linear(feat, ps, "embed.s1.fc2")  # (..., k, D/2)
    pooled = feat.max(axis=-2, keepdims=True)
    pooled = pooled.broadcast_to(feat.shape)
    both = T.concat([feat, pooled], axis=-1)  # (..., k, D)
    out = linear(both, ps, "embed.s2.fc1")
    out = T.relu(out)
    out = linear(out, ps, "embed.s2.fc2")
    return out.max(axis=-2)


def _sincos(values: np.ndarray, band: int) -> np.ndarray:
    """Standard geometric-frequency encoding of real values into ``band``
    channels: interleaved sin/cos over band/2 frequencies from 1 down to
    ~1/PE_BASE."""
    pairs = band // 2
    freqs = PE_BASE ** (-np.arange(pairs, dtype=np.float64) / pairs)
    angles = values[..., None] * freqs  # (..., pairs)
    out = np.empty(values.shape + (band,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def absolute_positional_encoding(coords, channels: int) -> np.ndarray:
    """Sinusoidal encoding of (..., 3) real coordinates into (..., D).

    The D channels split into three contiguous D/3 bands, one per axis.
    """
    if channels % 6 != 0:
        raise ValueError("channels must be divisible by 6")
    c = np.asarray(coords, dtype=np.float64)
    band = channels // 3
    return np.concatenate([_sincos(c[..., axis], band) for axis in range(3)], axis=-1)


def relative_direction_prompts(centers, channels: int) -> np.ndarray:
    """Encode unit directions between consecutive centers.

    Row i encodes (C[i+1] - C[i]) / ||C[i+1] - C[i]||; a zero offset
    (coincident centers) encodes the zero vector instead of erroring.
    Output has one row fewer than ``centers``.
    """
    c = np.asarray(centers, dtype=np.float64)
    if c.shape[-2] < 2:
        raise ValueError("need at least two centers for direction prompts")
    offsets = np.diff(c, axis=-2)
    norms = np.linalg.norm(offsets, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        units = np.where(norms > 0.0, offsets / norms, 0.0)
    return absolute_positional_encoding(units, channels)


def sequence_geometry(cloud, cfg: SequencerConfig, seed_index: int = 0):
    """The deterministic geometric half of the pipeline.

    Returns ``(order, sorted_centers, normalized_patches)``; cacheable
    because it involves no learned parameters.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] < max(cfg.num_patches, cfg.points_per_patch):
        raise ValueError(
            f"cloud with {pts.shape[0]} points is too small for "
            f"n={cfg.num_patches}, k={cfg.points_per_patch}"
        )
    centers, _ = geometry.fps(pts, cfg.num_patches, seed_index)
    patches, _ = geometry.knn(centers, pts, cfg.points_per_patch)
    order, sorted_centers, sorted_patches = geometry.sort_by_morton(centers, patches)
    normalized = geometry.normalize_patches(sorted_patches, sorted_centers)
    return order, sorted_centers, normalized


def build_sequence(
    cloud,
    cfg: SequencerConfig,
    ps: ParameterSet,
    seed_index: int = 0,
    dtype=np.float64,
) -> TokenSequence:
    """Full sequencing: geometry, embedding, and both positional encodings."""
    order, centers, patches = sequence_geometry(cloud, cfg, seed_index)
    tokens = embed_patches(patches.astype(dtype), ps)
    ape = absolute_positional_encoding(centers, cfg.channels).astype(dtype)
    rdp = relative_direction_prompts(centers, cfg.channels).astype(dtype)
    return TokenSequence(
        tokens=tokens, centers=centers, patches=patches, ape=ape, rdp=rdp, order=order
    )
