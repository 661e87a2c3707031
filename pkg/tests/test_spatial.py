import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinecomplete.errors import EmptyCloudError, InvalidInputError
from spinecomplete.geometry import PointCloud
from spinecomplete.spatial import (
    SpatialIndex,
    downsample_to,
    fps,
    fps_indices,
    knn,
    knn_graph,
    occupancy,
    random_downsample,
    voxel_downsample,
)


def _linear_scan(points, q, k):
    d2 = ((points - q) ** 2).sum(1)
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return order, d2[order]


def test_knn_self_query(backend):
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert knn(SpatialIndex(pts), pts[17], 1) == [(17, 0.0)]


def test_knn_small_example(backend):
    idx = SpatialIndex([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    res = knn(idx, [0.4, 0, 0], 2)
    assert [i for i, _ in res] == [0, 1]
    assert res[0][1] == pytest.approx(0.4) and res[1][1] == pytest.approx(0.6)


def test_knn_matches_linear_scan(backend, rng):
    pts = rng.normal(size=(1000, 3))
    q = rng.normal(size=(100, 3))
    idx, d2 = SpatialIndex(pts).query(q, 10)
    for i in range(len(q)):
        o, d = _linear_scan(pts, q[i], 10)
        assert np.array_equal(idx[i], o)
        assert np.array_equal(d2[i], d)


def test_knn_ties_go_to_lower_index(backend):
    # a lattice with many exactly equal distances
    pts = np.array(list(itertools.product(range(4), repeat=3)), dtype=float)
    perm = np.random.default_rng(1).permutation(len(pts))
    pts = pts[perm]
    q = pts + 0.0
    idx, _ = SpatialIndex(pts, leaf_size=4).query(q, 7)
    for i in range(len(q)):
        assert np.array_equal(idx[i], _linear_scan(pts, q[i], 7)[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.integers(1, 12), st.integers(0, 2**31), st.booleans())
def test_knn_property(n, k, seed, quantize):
    from spinecomplete import _accel

    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    if quantize:
        pts = np.round(pts * 2) / 2  # many duplicates and ties
    k = min(k, n)
    q = rng.normal(size=(20, 3))
    with _accel.use_numba(True):
        a = SpatialIndex(pts, leaf_size=3).query(q, k)
    with _accel.use_numba(False):
        b = SpatialIndex(pts).query(q, k)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    for i in range(len(q)):
        assert np.array_equal(a[0][i], _linear_scan(pts, q[i], k)[0])


def test_knn_k_too_large(backend):
    with pytest.raises(InvalidInputError):
        SpatialIndex(np.zeros((3, 3))).query(np.zeros((1, 3)), 4)


def test_knn_graph_excludes_self(backend, rng):
    pts = rng.normal(size=(30, 3))
    g = knn_graph(pts, 5)
    assert g.shape == (30, 5)
    assert not np.any(g == np.arange(30)[:, None])


# -- fps ------------------------------------------------------------------------------


def test_fps_full_is_permutation(backend, rng):
    pc = PointCloud(rng.normal(size=(40, 3)), labels=np.arange(40))
    out = fps(pc, 40, seed=3)
    assert sorted(out.labels.tolist()) == list(range(40))


def test_fps_colinear(backend):
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    assert fps_indices(pts, 2, 0).tolist() == [0, 2]


def test_fps_deterministic(backend, rng):
    pc = PointCloud(rng.normal(size=(100, 3)))
    assert np.array_equal(fps(pc, 20, 5).points, fps(pc, 20, 5).points)


def test_fps_greedy_radius_monotone(backend, rng):
    pts = rng.normal(size=(300, 3))
    order = fps_indices(pts, 30, 0)

    def min_pair(sel):
        p = pts[sel]
        d = np.linalg.norm(p[:, None] - p[None], axis=2)
        return d[np.triu_indices(len(sel), 1)].min()

    radii = [min_pair(order[:n]) for n in range(2, 31)]
    assert all(a >= b for a, b in zip(radii, radii[1:]))


def test_fps_backends_agree(rng):
    from spinecomplete import _accel

    pts = rng.normal(size=(500, 3))
    with _accel.use_numba(True):
        a = fps_indices(pts, 100, 7)
    with _accel.use_numba(False):
        b = fps_indices(pts, 100, 7)
    assert np.array_equal(a, b)


def test_fps_too_many():
    with pytest.raises(InvalidInputError):
        fps(PointCloud(np.zeros((2, 3))), 3)


# -- voxel / random downsampling ------------------------------------------------------


def test_voxel_centroid():
    out = voxel_downsample(PointCloud([[0, 0, 0], [1, 0, 0]]), 10.0)
    assert out.points.tolist() == [[0.5, 0.0, 0.0]]


def test_voxel_sparse_cloud_unchanged(rng):
    pts = np.array(list(itertools.product(range(3), repeat=3)), dtype=float) * 10
    out = voxel_downsample(PointCloud(pts[rng.permutation(len(pts))]), 1.0)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_voxel_majority_label():
    out = voxel_downsample(PointCloud(np.zeros((3, 3)), labels=[5, 1, 1]), 1.0)
    assert out.labels.tolist() == [1]
    out = voxel_downsample(PointCloud(np.zeros((2, 3)), labels=[5, 2]), 1.0)
    assert out.labels.tolist() == [2]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.floats(0.05, 2.0), st.integers(0, 2**31))
def test_voxel_properties(n, size, seed):
    rng = np.random.default_rng(seed)
    pc = PointCloud(rng.normal(size=(n, 3)))
    out = voxel_downsample(pc, size)
    assert len(out) <= n
    origin = pc.points.min(0)
    cells = np.floor((out.points - origin) / size)
    lo = origin + cells * size
    assert np.all(out.points >= lo - 1e-9) and np.all(out.points <= lo + size + 1e-9)


def test_random_downsample_permutation(rng):
    pc = PointCloud(rng.normal(size=(10, 3)), labels=np.arange(10))
    assert sorted(random_downsample(pc, 10, 1).labels.tolist()) == list(range(10))


def test_random_downsample_pads():
    pc = PointCloud([[0, 0, 0], [1, 1, 1]], labels=[0, 1])
    out = random_downsample(pc, 4, 0)
    assert len(out) == 4
    assert set(out.labels.tolist()) <= {0, 1}
    assert sorted(out.labels[:2].tolist()) == [0, 1]


def test_random_downsample_uniform():
    # 10 + 10^5 draws: a permutation followed by 10^5 draws with replacement
    pc = PointCloud(np.zeros((10, 3)), labels=np.arange(10))
    draws = random_downsample(pc, 100_010, 0).labels[10:]
    counts = np.bincount(draws, minlength=10)
    freq = counts / counts.sum()
    assert np.abs(freq - 0.1).max() < 0.01
    chi2 = float(((counts - 10_000) ** 2 / 10_000).sum())
    assert chi2 < 27.88  # 99.9% quantile, 9 degrees of freedom


def test_random_downsample_empty():
    with pytest.raises(EmptyCloudError):
        random_downsample(PointCloud(np.zeros((0, 3))), 3)


def test_downsample_to_exact_count(rng):
    pc = PointCloud(rng.normal(size=(500, 3)))
    assert len(downsample_to(pc, 100, 0.2)) == 100
    assert len(downsample_to(pc, 100, method="fps")) == 100
    with pytest.raises(InvalidInputError):
        downsample_to(pc, 100, method="nope")


# -- occupancy -------------------------------------------------------------------------


def test_occupancy_examples():
    assert occupancy(PointCloud([[0.0, 0, 0]]), np.zeros(3), 1.0).occupied == {(0, 0, 0)}
    g = occupancy(PointCloud([[0.1, 0, 0], [9.9, 0, 0]]), np.zeros(3), 5.0)
    assert g.occupied == {(0, 0, 0), (1, 0, 0)}
    assert len(occupancy(PointCloud(np.zeros((0, 3))), np.zeros(3), 1.0)) == 0


def test_occupancy_order_invariant(rng):
    pts = rng.normal(size=(200, 3))
    a = occupancy(PointCloud(pts), pts.min(0), 0.3)
    b = occupancy(PointCloud(pts[::-1]), pts.min(0), 0.3)
    assert np.array_equal(a.cells, b.cells)
