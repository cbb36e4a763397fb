import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from lma.embedding import EmbeddingMatrix
from lma.neighbors import NeighborIndex, NeighborIndexError, build_index, query_knn, sample_knn_view
from lma.rng import RngStream


def brute_force(values, ids, q, k, exclude_row=None):
    """All-pairs oracle: double loop over rows, sort by (distance, id)."""
    rows = []
    for j in range(len(values)):
        if j == exclude_row:
            continue
        d = 0.0
        for a, b in zip(q, values[j]):
            d += (a - b) ** 2
        rows.append((d ** 0.5, ids[j]))
    rows.sort()
    return [(i, d) for d, i in rows[:k]]


def matrix(n, d, seed=0, ids=None):
    v = np.random.default_rng(seed).normal(size=(n, d))
    return EmbeddingMatrix(v, list(ids) if ids is not None else list(range(n)))


def test_ten_points_match_brute_force():
    m = matrix(10, 4, seed=3)
    idx = build_index(m, 3)
    for i in range(10):
        got = query_knn(idx, i, 3)
        want = brute_force(m.values, m.ids, m.values[i], 3)
        assert [g[0] for g in got] == [w[0] for w in want]
        assert np.allclose([g[1] for g in got], [w[1] for w in want], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 60), d=st.integers(1, 8), seed=st.integers(0, 10_000), data=st.data())
def test_exactness_property(n, d, seed, data):
    include_self = data.draw(st.booleans())
    k = data.draw(st.integers(1, n if include_self else n - 1))
    # non-contiguous ids
    m = matrix(n, d, seed, ids=range(100, 100 + 3 * n, 3))
    idx = build_index(m, k, include_self)
    for row in range(0, n, max(1, n // 5)):
        got = query_knn(idx, m.ids[row], k)
        want = brute_force(m.values, m.ids, m.values[row], k, None if include_self else row)
        assert [g[0] for g in got] == [w[0] for w in want]
        dists = [g[1] for g in got]
        assert all(a <= b for a, b in zip(dists, dists[1:]))


def test_self_first_with_distance_zero():
    m = matrix(20, 5)
    idx = build_index(m, 1)
    assert query_knn(idx, 7, 1) == [(7, 0.0)]


def test_ties_broken_by_lower_id():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
    idx = build_index(EmbeddingMatrix(v, [10, 4, 2, 1]), 2, include_self=False)
    assert [i for i, _ in query_knn(idx, 10, 2)] == [2, 4]


def test_vector_query_and_symmetry():
    m = matrix(30, 6, seed=9)
    idx = build_index(m, 5)
    q = np.random.default_rng(1).normal(size=6)
    assert [i for i, _ in query_knn(idx, q)] == [i for i, _ in brute_force(m.values, m.ids, q, 5)]
    d = idx.distances_to(m.values)
    assert np.array_equal(d, d.T)


def test_k_bounds():
    m = matrix(100, 4)
    build_index(m, 20)
    build_index(m, 5)
    build_index(m, 100)
    with pytest.raises(NeighborIndexError):
        build_index(m, 0)
    with pytest.raises(NeighborIndexError):
        build_index(m, 101)
    with pytest.raises(NeighborIndexError):
        build_index(m, 100, include_self=False)
    idx = build_index(m, 5)
    with pytest.raises(NeighborIndexError):
        query_knn(idx, 0, 101)


def test_unknown_id():
    idx = build_index(matrix(5, 2), 2)
    with pytest.raises(NeighborIndexError, match="unknown"):
        query_knn(idx, 99)
    with pytest.raises(NeighborIndexError):
        sample_knn_view(idx, 99, RngStream("s", 0))


def test_precompute_matches_queries():
    m = matrix(300, 8, seed=5)
    for include_self in (True, False):
        idx = build_index(m, 7, include_self)
        lazy = {i: idx.neighbor_ids(i).copy() for i in m.ids}
        idx2 = build_index(m, 7, include_self)
        idx2.precompute()
        for i in m.ids:
            assert np.array_equal(lazy[i], idx2.neighbor_ids(i))


def test_sampling_k1_without_self_is_nearest():
    m = matrix(40, 3, seed=2)
    idx = build_index(m, 1, include_self=False)
    nearest = query_knn(idx, 11, 1)[0][0]
    rng = RngStream("s", 0)
    assert {sample_knn_view(idx, 11, rng) for _ in range(50)} == {nearest}


def test_sampling_uniform_over_knn():
    m = matrix(200, 6, seed=4)
    idx = build_index(m, 5)
    members = [i for i, _ in query_knn(idx, 17, 5)]
    rng = RngStream("knn-draws", 0)
    draws = [sample_knn_view(idx, 17, rng) for _ in range(10_000)]
    assert set(draws) <= set(members)
    counts = [draws.count(i) for i in members]
    assert chisquare(counts).pvalue > 0.01


def test_save_load(tmp_path):
    m = matrix(50, 4, seed=8)
    idx = build_index(m, 6, include_self=False)
    idx.save(tmp_path)
    back = NeighborIndex.load(tmp_path)
    assert back.k == 6 and not back.include_self
    for i in (0, 13, 49):
        assert query_knn(back, i) == query_knn(idx, i)
