"""Geometry kernels against brute-force oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointar import geometry
from tests.conftest import make_cloud


# -- independent oracles -----------------------------------------------------


def fps_oracle(points: np.ndarray, n: int, seed_index: int) -> np.ndarray:
    """Greedy selection by exhaustive min-distance evaluation."""
    selected = [seed_index]
    while len(selected) < n:
        best_idx, best_dist = None, -1.0
        for cand in range(len(points)):
            if cand in selected:
                continue
            dist = min(np.linalg.norm(points[cand] - points[s]) for s in selected)
            if dist > best_dist:
                best_dist, best_idx = dist, cand
        selected.append(best_idx)
    return np.array(selected)


def knn_oracle(center: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Full sort by (distance, index)."""
    dists = np.linalg.norm(points - center, axis=1)
    order = sorted(range(len(points)), key=lambda i: (dists[i], i))
    return np.array(order[:k])


def morton_oracle(cell: tuple[int, int, int], bits: int) -> int:
    code = 0
    for b in range(bits):
        code |= ((cell[0] >> b) & 1) << (3 * b)
        code |= ((cell[1] >> b) & 1) << (3 * b + 1)
        code |= ((cell[2] >> b) & 1) << (3 * b + 2)
    return code


# -- fps ----------------------------------------------------------------------


def test_fps_unit_square_derived_example():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    centers, idx = geometry.fps(pts, 2, seed_index=0)
    assert np.array_equal(centers[1], [1.0, 1.0, 0.0])
    assert np.array_equal(idx, fps_oracle(pts, 2, 0))


def test_fps_selects_all_points_when_n_equals_m(rng):
    pts = make_cloud(rng, 12)
    _, idx = geometry.fps(pts, 12, seed_index=3)
    assert sorted(idx.tolist()) == list(range(12))
    assert np.array_equal(idx, fps_oracle(pts, 12, 3))


def test_fps_single_selection():
    pts = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    centers, idx = geometry.fps(pts, 1, seed_index=0)
    assert np.array_equal(centers, pts[:1])
    assert idx.tolist() == [0]


def test_fps_matches_oracle_on_random_clouds(rng):
    for _ in range(10):
        pts = make_cloud(rng, 40)
        n = int(rng.integers(1, 12))
        seed = int(rng.integers(0, 40))
        _, idx = geometry.fps(pts, n, seed)
        assert np.array_equal(idx, fps_oracle(pts, n, seed))


def test_fps_greedy_prefix_property(rng):
    pts = make_cloud(rng, 30)
    _, full = geometry.fps(pts, 20, seed_index=5)
    for m in (1, 7, 13):
        _, prefix = geometry.fps(pts, m, seed_index=5)
        assert np.array_equal(prefix, full[:m])


def test_fps_indices_distinct_with_duplicate_points():
    pts = np.zeros((6, 3))
    _, idx = geometry.fps(pts, 6, seed_index=2)
    assert sorted(idx.tolist()) == list(range(6))


def test_fps_rejects_bad_arguments(rng):
    pts = make_cloud(rng, 8)
    with pytest.raises(ValueError):
        geometry.fps(pts, 9, 0)
    with pytest.raises(ValueError):
        geometry.fps(pts, 0, 0)
    with pytest.raises(ValueError):
        geometry.fps(pts, 2, 8)
    bad = pts.copy()
    bad[3, 1] = np.nan
    with pytest.raises(ValueError):
        geometry.fps(bad, 2, 0)


# -- knn ----------------------------------------------------------------------


def test_knn_collinear_derived_example():
    cloud = np.array([[x, 0.0, 0.0] for x in range(5)])
    patches, idx = geometry.knn(np.array([[0.0, 0.0, 0.0]]), cloud, 3)
    assert idx[0].tolist() == [0, 1, 2]
    assert np.array_equal(patches[0, :, 0], [0.0, 1.0, 2.0])


def test_knn_with_k_equals_m_is_permutation(rng):
    cloud = make_cloud(rng, 9)
    centers = make_cloud(rng, 4)
    _, idx = geometry.knn(centers, cloud, 9)
    for row in idx:
        assert sorted(row.tolist()) == list(range(9))


def test_knn_center_on_cloud_point_is_row_zero(rng):
    cloud = make_cloud(rng, 16)
    _, idx = geometry.knn(cloud[[5]], cloud, 4)
    assert idx[0, 0] == 5


def test_knn_rows_sorted_by_distance_ties_to_lower_index(rng):
    for _ in range(10):
        cloud = make_cloud(rng, 50)
        centers = make_cloud(rng, 6)
        patches, idx = geometry.knn(centers, cloud, 11)
        for c, row in zip(centers, idx):
            assert np.array_equal(row, knn_oracle(c, cloud, 11))
            dists = np.linalg.norm(cloud[row] - c, axis=1)
            assert (np.diff(dists) >= -1e-12).all()


def test_knn_rejects_k_larger_than_cloud(rng):
    cloud = make_cloud(rng, 5)
    with pytest.raises(ValueError):
        geometry.knn(cloud[:2], cloud, 6)


# -- morton --------------------------------------------------------------------


def test_morton_trivial_corners():
    lo, hi = np.zeros(3), np.ones(3)
    assert int(geometry.morton_encode(lo, lo, hi)) == 0
    assert int(geometry.morton_encode(hi, lo, hi)) == 2**63 - 1


def test_morton_single_cell_axes_derived():
    lo, hi = np.zeros(3), np.full(3, 4.0)
    # with bits=2 integer coordinates in [0, 4) are their own cells
    assert int(geometry.morton_encode(np.array([1.0, 0, 0]), lo, hi, 2)) == 1
    assert int(geometry.morton_encode(np.array([0, 1.0, 0]), lo, hi, 2)) == 2
    assert int(geometry.morton_encode(np.array([0, 0, 1.0]), lo, hi, 2)) == 4


@given(
    st.tuples(
        st.integers(min_value=0, max_value=2**21 - 1),
        st.integers(min_value=0, max_value=2**21 - 1),
        st.integers(min_value=0, max_value=2**21 - 1),
    )
)
@settings(max_examples=60, deadline=None)
def test_morton_matches_bit_interleave_oracle(cell):
    lo = np.zeros(3)
    hi = np.full(3, float(2**21))
    coord = np.array(cell, dtype=float)  # integer coords land in their own cells
    assert int(geometry.morton_encode(coord, lo, hi)) == morton_oracle(cell, 21)


def test_morton_monotone_per_axis(rng):
    lo, hi = np.zeros(3), np.ones(3)
    for axis in range(3):
        base = rng.uniform(0.1, 0.9, 3)
        values = np.sort(rng.uniform(0.0, 1.0, 16))
        coords = np.tile(base, (16, 1))
        coords[:, axis] = values
        codes = geometry.morton_encode(coords, lo, hi)
        assert (np.diff(codes.astype(np.int64)) >= 0).all()


def test_morton_degenerate_axis_quantizes_to_zero():
    lo = np.zeros(3)
    hi = np.array([1.0, 0.0, 1.0])  # y axis has zero extent
    code = geometry.morton_encode(np.array([0.0, 5.0, 0.0]), lo, hi)
    assert int(code) == 0


def test_morton_clamps_outside_bbox():
    lo, hi = np.zeros(3), np.ones(3)
    below = geometry.morton_encode(np.array([-3.0, -3.0, -3.0]), lo, hi)
    above = geometry.morton_encode(np.array([9.0, 9.0, 9.0]), lo, hi)
    assert int(below) == 0
    assert int(above) == 2**63 - 1


# -- sort_by_morton -------------------------------------------------------------


def sort_oracle(centers: np.ndarray) -> np.ndarray:
    codes = geometry.morton_encode(centers, centers.min(axis=0), centers.max(axis=0))
    pairs = sorted(range(len(centers)), key=lambda i: (int(codes[i]), i))
    return np.array(pairs)


def test_sort_by_morton_identity_cases(rng):
    centers = make_cloud(rng, 1)
    patches = rng.normal(size=(1, 4, 3))
    order, c, p = geometry.sort_by_morton(centers, patches)
    assert order.tolist() == [0]
    assert np.array_equal(c, centers) and np.array_equal(p, patches)


def test_sort_by_morton_stable_on_sorted_keys():
    centers = np.array([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]])
    patches = np.zeros((2, 3, 3))
    order, _, _ = geometry.sort_by_morton(centers, patches)
    assert order.tolist() == [0, 1]
    # all-equal keys (duplicate centers) keep original order by stability
    dup = np.zeros((4, 3))
    order2, _, _ = geometry.sort_by_morton(dup, np.zeros((4, 2, 3)))
    assert order2.tolist() == [0, 1, 2, 3]


def test_sort_by_morton_matches_oracle_on_random_centers(rng):
    centers = make_cloud(rng, 100)
    patches = rng.normal(size=(100, 5, 3))
    order, sorted_centers, sorted_patches = geometry.sort_by_morton(centers, patches)
    expected = sort_oracle(centers)
    assert np.array_equal(order, expected)
    assert np.array_equal(sorted_centers, centers[expected])
    assert np.array_equal(sorted_patches, patches[expected])
    # determinism: applying twice yields identical results
    order2, _, _ = geometry.sort_by_morton(centers, patches)
    assert np.array_equal(order, order2)


# -- normalize_patches -----------------------------------------------------------


def test_normalize_patches_examples(rng):
    centers = make_cloud(rng, 3)
    patches = np.repeat(centers[:, None, :], 4, axis=1)
    assert np.array_equal(
        geometry.normalize_patches(patches, centers), np.zeros((3, 4, 3))
    )
    zero_centers = np.zeros((3, 3))
    random_patches = rng.normal(size=(3, 4, 3))
    assert np.array_equal(
        geometry.normalize_patches(random_patches, zero_centers), random_patches
    )


def test_normalize_round_trip_bit_exact(rng):
    # Clouds are float32-sourced (the dataset format), so float64
    # differences of their coordinates are exact and the round trip is
    # bitwise lossless.
    cloud = make_cloud(rng, 200).astype(np.float32).astype(np.float64)
    centers, _ = geometry.fps(cloud, 8, 0)
    patches, _ = geometry.knn(centers, cloud, 12)
    normalized = geometry.normalize_patches(patches, centers)
    restored = normalized + centers[:, None, :]
    assert np.array_equal(restored, patches)
