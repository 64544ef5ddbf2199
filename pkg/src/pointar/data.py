"""Synthetic shape corpus: surface-uniform sampling of five analytic
shapes, augmentation, a binary dataset format, and stratified splits.

Two disjoint parameter pools (A and B) stand in for separate corpora:
A feeds self-supervised pre-training, B the labeled supervised stages.
Record generation is keyed by (seed, record index), so any record can be
regenerated independently.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pointar.exceptions import FormatError

__all__ = [
    "SHAPE_CLASSES",
    "ShapeSpec",
    "CloudRecord",
    "DatasetManifest",
    "AugmentConfig",
    "generate_shape",
    "sample_spec",
    "generate_dataset",
    "augment",
    "save_dataset",
    "load_dataset",
    "save_manifest",
    "load_manifest",
    "make_splits",
]

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus")
SPLITS = ("train", "val", "test")

MAGIC = b"PGPT"
FORMAT_VERSION = 1

# Parameter ranges per pool. Absolute size washes out in the unit-ball
# normalization, so the pools differ in aspect ratios, which survive it.
_POOLS = {
    "A": {
        "sphere": {"radius": (0.5, 1.0)},
        "cube": {"half_extents": (0.3, 0.8)},
        "cylinder": {"radius": (0.25, 0.45), "height": (1.2, 2.0)},
        "cone": {"radius": (0.35, 0.6), "height": (1.2, 2.0)},
        "torus": {"major": (0.7, 1.0), "minor": (0.12, 0.25)},
    },
    "B": {
        "sphere": {"radius": (1.1, 1.8)},
        "cube": {"half_extents": (0.9, 1.6)},
        "cylinder": {"radius": (0.5, 0.8), "height": (0.6, 1.1)},
        "cone": {"radius": (0.7, 1.1), "height": (0.6, 1.1)},
        "torus": {"major": (1.1, 1.5), "minor": (0.3, 0.5)},
    },
}


@dataclass(frozen=True)
class ShapeSpec:
    """One analytic surface. ``dims`` meaning depends on kind:

    sphere (r,), cube (ax, ay, az) half extents, cylinder (r, h),
    cone (r, h), torus (major R, minor r) with r < R.
    """

    kind: str
    dims: tuple[float, ...]
    label: int

    def __post_init__(self):
        if self.kind not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(d <= 0 for d in self.dims):
            raise ValueError("shape dimensions must be positive")
        if self.kind == "torus" and self.dims[1] >= self.dims[0]:
            raise ValueError("torus minor radius must be below the major radius")


@dataclass
class CloudRecord:
    points: np.ndarray  # (M, 3) float32, unit-ball normalized
    label: int
    provenance: ShapeSpec | None = None
    seed: int | None = None


@dataclass
class DatasetManifest:
    """Split assignment per record index."""

    labels: list[int]
    splits: list[str]
    class_names: tuple[str, ...] = SHAPE_CLASSES
    seed: int = 0

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.splits)


def _sample_sphere(dims, m, rng):
    (r,) = dims
    z = rng.uniform(-1.0, 1.0, m)
    phi = rng.uniform(0.0, 2.0 * np.pi, m)
    s = np.sqrt(1.0 - z * z)
    return r * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _sample_cube(dims, m, rng):
    ax, ay, az = dims
    areas = np.array([ay * az, ay * az, ax * az, ax * az, ax * ay, ax * ay])
    face = rng.choice(6, size=m, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, m)
    v = rng.uniform(-1.0, 1.0, m)
    pts = np.empty((m, 3))
    axis = face // 2  # 0=x faces, 1=y, 2=z
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = np.array([ax, ay, az])
    for a in range(3):
        sel = axis == a
        o1, o2 = (a + 1) % 3, (a + 2) % 3
        pts[sel, a] = sign[sel] * half[a]
        pts[sel, o1] = u[sel] * half[o1]
        pts[sel, o2] = v[sel] * half[o2]
    return pts


def _sample_cylinder(dims, m, rng):
    r, h = dims
    lateral = 2.0 * np.pi * r * h
    cap = np.pi * r * r
    comp = rng.choice(3, size=m, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, m)
    u = rng.uniform(0.0, 1.0, m)
    pts = np.empty((m, 3))
    side = comp == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = (u[side] - 0.5) * h
    for which, zsign in ((1, 1.0), (2, -1.0)):
        sel = comp == which
        rr = r * np.sqrt(u[sel])
        pts[sel, 0] = rr * np.cos(theta[sel])
        pts[sel, 1] = rr * np.sin(theta[sel])
        pts[sel, 2] = zsign * h / 2.0
    return pts


def _sample_cone(dims, m, rng):
    r, h = dims
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    comp = rng.choice(2, size=m, p=np.array([lateral, base]) / (lateral + base))
    theta = rng.uniform(0.0, 2.0 * np.pi, m)
    u = rng.uniform(0.0, 1.0, m)
    pts = np.empty((m, 3))
    side = comp == 0
    frac = np.sqrt(u[side])  # area-uniform distance fraction from the apex
    pts[side, 0] = r * frac * np.cos(theta[side])
    pts[side, 1] = r * frac * np.sin(theta[side])
    pts[side, 2] = h / 2.0 - frac * h
    sel = comp == 1
    rr = r * np.sqrt(u[sel])
    pts[sel, 0] = rr * np.cos(theta[sel])
    pts[sel, 1] = rr * np.sin(theta[sel])
    pts[sel, 2] = -h / 2.0
    return pts


def _sample_torus(dims, m, rng):
    big, small = dims
    phi = rng.uniform(0.0, 2.0 * np.pi, m)
    # Poloidal angle by rejection: density proportional to R + r*cos(theta).
    theta = np.empty(m)
    need = np.arange(m)
    while need.size:
        cand = rng.uniform(0.0, 2.0 * np.pi, need.size)
        accept = rng.uniform(0.0, 1.0, need.size) < (big + small * np.cos(cand)) / (big + small)
        theta[need[accept]] = cand[accept]
        need = need[~accept]
    ring = big + small * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
}


def generate_shape(spec: ShapeSpec, num_points: int, rng: np.random.Generator) -> CloudRecord:
    """Sample ``num_points`` surface points and scale to the unit ball.

    Shapes are constructed symmetric about the origin, so centering is
    exact and a unit sphere keeps all norms at 1 after normalization.
    """
    if num_points < 1:
        raise ValueError("num_points must be positive")
    pts = _SAMPLERS[spec.kind](spec.dims, num_points, rng)
    max_norm = np.linalg.norm(pts, axis=1).max()
    if max_norm > 0.0:
        pts = pts / max_norm
    return CloudRecord(points=pts.astype(np.float32), label=spec.label, provenance=spec)


def sample_spec(pool: str, kind: str, rng: np.random.Generator) -> ShapeSpec:
    """Draw shape dimensions from one pool's parameter ranges."""
    if pool not in _POOLS:
        raise ValueError(f"pool must be one of {tuple(_POOLS)}, got {pool!r}")
    ranges = _POOLS[pool][kind]
    label = SHAPE_CLASSES.index(kind)
    if kind == "sphere":
        dims = (rng.uniform(*ranges["radius"]),)
    elif kind == "cube":
        dims = tuple(rng.uniform(*ranges["half_extents"], 3))
    elif kind == "cylinder" or kind == "cone":
        dims = (rng.uniform(*ranges["radius"]), rng.uniform(*ranges["height"]))
    else:
        dims = (rng.uniform(*ranges["major"]), rng.uniform(*ranges["minor"]))
    return ShapeSpec(kind=kind, dims=dims, label=label)


def generate_dataset(
    pool: str, count: int, seed: int, num_points: int = 1024
) -> list[CloudRecord]:
    """Deterministic corpus: classes round-robin over record index, and
    each record drawn from its own (seed, index) stream."""
    records = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        kind = SHAPE_CLASSES[index % len(SHAPE_CLASSES)]
        spec = sample_spec(pool, kind, rng)
        rec = generate_shape(spec, num_points, rng)
        rec.seed = index
        records.append(rec)
    return records


@dataclass(frozen=True)
class AugmentConfig:
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    rotate: bool = True
    rotation_angle: float | None = None  # None draws uniformly in [0, 2*pi)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05


def augment(record: CloudRecord, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> CloudRecord:
    """Random scale, up-axis rotation, and clipped per-point jitter.

    The label always survives. With the identity configuration
    (scale range (1, 1), no rotation, sigma 0) the points are bit-equal.
    """
    pts = record.points.astype(np.float64)
    scale = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    if scale != 1.0:
        pts = pts * scale
    if cfg.rotate:
        angle = cfg.rotation_angle
        if angle is None:
            angle = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pts = pts @ rot.T
    if cfg.jitter_sigma > 0.0:
        noise = rng.normal(0.0, cfg.jitter_sigma, pts.shape)
        np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip, out=noise)
        pts = pts + noise
    return CloudRecord(points=pts.astype(np.float32), label=record.label,
                       provenance=record.provenance, seed=record.seed)


def save_dataset(path, records: list[CloudRecord]) -> None:
    """Little-endian binary: magic, version u16, count u32, then per record
    label u16, point count u32, and interleaved xyz float32."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(records)))
        for rec in records:
            pts = np.ascontiguousarray(rec.points, dtype="<f4")
            fh.write(struct.pack("<HI", rec.label, pts.shape[0]))
            fh.write(pts.tobytes())


def _read_exact(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("dataset file is truncated")
    return buf


def load_dataset(path) -> list[CloudRecord]:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic, not a dataset file")
        version, count = struct.unpack("<HI", _read_exact(fh, 6))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        records = []
        for _ in range(count):
            label, num = struct.unpack("<HI", _read_exact(fh, 6))
            raw = _read_exact(fh, 12 * num)
            pts = np.frombuffer(raw, dtype="<f4").reshape(num, 3).copy()
            records.append(CloudRecord(points=pts, label=int(label)))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last record")
    return records


def save_manifest(path, manifest: DatasetManifest) -> None:
    """Line-oriented text: index<TAB>label<TAB>split."""
    path = Path(path)
    lines = [f"{i}\t{label}\t{split}" for i, (label, split) in enumerate(zip(manifest.labels, manifest.splits))]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    labels, splits = [], []
    for lineno, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno + 1}: expected index<TAB>label<TAB>split")
        idx, label, split = parts
        if int(idx) != len(labels):
            raise FormatError(f"{path}:{lineno + 1}: record indices out of order")
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno + 1}: unknown split {split!r}")
        labels.append(int(label))
        splits.append(split)
    return DatasetManifest(labels=labels, splits=splits)


def make_splits(labels, seed: int, fractions: tuple[float, float, float]) -> DatasetManifest:
    """Stratified deterministic split into train/val/test.

    Per class, a seeded shuffle is cut at floor(cumsum(fraction) * count)
    boundaries, which keeps every class's split sizes within one record
    of the target fraction.
    """
    fracs = np.asarray(fractions, dtype=np.float64)
    if fracs.shape != (3,) or (fracs < 0).any() or abs(fracs.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three nonnegative values summing to 1")
    labels = [int(x) for x in labels]
    n_active = int((fracs > 0).sum())
    splits = [""] * len(labels)
    rng = np.random.default_rng(seed)
    for cls in sorted(set(labels)):
        idx = np.array([i for i, lab in enumerate(labels) if lab == cls])
        if idx.size < n_active:
            raise ValueError(
                f"class {cls} has {idx.size} records, fewer than the {n_active} nonempty splits"
            )
        perm = rng.permutation(idx.size)
        shuffled = idx[perm]
        bounds = np.floor(np.cumsum(fracs) * idx.size).astype(int)
        bounds[-1] = idx.size
        start = 0
        for split_name, stop in zip(SPLITS, bounds):
            for i in shuffled[start:stop]:
                splits[i] = split_name
            start = stop
    return DatasetManifest(labels=labels, splits=splits, seed=seed)
