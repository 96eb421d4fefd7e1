import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuc.exceptions import BuildError, QueryError, ShapeError
from nuc.knn_index import DistanceKernel, KNNIndex, build_index
from nuc.repr_store import ReprSet

from oracles import knn_scan


def _line_set():
    X = np.array([[0, 0], [1, 0], [3, 0]], np.float32)
    return ReprSet(X, [7, 8, 9], [7, 8, 9], [1.0, 1.0, 1.0], ids=[100, 101, 102])


def test_hand_geometry():
    idx = build_index(_line_set())
    nq = idx.query([0, 0], 2)
    assert nq.neighbor_ids.tolist() == [100, 101]
    assert nq.distances.tolist() == [0.0, 1.0]
    assert nq.neighbor_labels.tolist() == [7, 8]
    nq = idx.query([0, 0], 2, exclude_id=100)
    assert nq.neighbor_ids.tolist() == [101, 102]
    assert nq.distances.tolist() == [1.0, 3.0]


def test_single_point_self_exclusion_fails():
    rs = ReprSet(np.ones((1, 3)), [0], [0], [0.5])
    idx = build_index(rs)
    assert idx.query(np.ones(3), 1).distances.tolist() == [0.0]
    with pytest.raises(QueryError):
        idx.query(np.ones(3), 1, exclude_id=0)


def test_errors():
    idx = build_index(_line_set())
    with pytest.raises(QueryError):
        idx.query([0, 0], 4)
    with pytest.raises(QueryError):
        idx.query([0, 0], 0)
    with pytest.raises(ShapeError):
        idx.query([0, 0, 0], 1)
    with pytest.raises(BuildError):
        KNNIndex(kernel="cosine_distance").fit(np.array([[0.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        DistanceKernel.parse("manhattan")


def test_ties_broken_by_id():
    X = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], np.float32)
    idx = KNNIndex().fit(X, ids=[40, 10, 30, 20])
    nq = idx.query([0, 0], 4)
    assert nq.neighbor_ids.tolist() == [10, 20, 30, 40]


def test_duplicates_and_self_exclusion():
    X = np.zeros((4, 2), np.float32)
    idx = KNNIndex().fit(X, ids=[0, 1, 2, 3])
    nq = idx.query([0, 0], 2, exclude_id=3)
    assert nq.neighbor_ids.tolist() == [0, 1]
    nq = idx.query([0, 0], 2, exclude_id=0)
    assert nq.neighbor_ids.tolist() == [1, 2]


@pytest.mark.parametrize("kernel", ["euclidean", "cosine_distance"])
def test_matches_scan_oracle(kernel):
    rng = np.random.default_rng(5)
    X = rng.standard_normal((500, 16)).astype(np.float32)
    idx = KNNIndex(kernel=kernel, batch_size=64).fit(X)
    Q = rng.standard_normal((40, 16))
    dist, pos = idx.kneighbors(Q, 10)
    for r in range(len(Q)):
        ids, d, _ = knn_scan(X, Q[r], 10, kernel)
        assert pos[r].tolist() == ids.tolist()
        np.testing.assert_allclose(dist[r], d, rtol=1e-6, atol=1e-12)


def test_self_exclusion_positive_distance():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((200, 4)).astype(np.float32)
    idx = KNNIndex().fit(X)
    dist, pos = idx.kneighbors(X, 3, exclude_ids=np.arange(200))
    assert np.all(dist[:, 0] > 0)
    assert not np.any(pos == np.arange(200)[:, None])


def test_deterministic_and_worker_independent():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((300, 8)).astype(np.float32)
    Q = rng.standard_normal((90, 8))
    a = KNNIndex(batch_size=16, n_jobs=1).fit(X).kneighbors(Q, 7)
    b = KNNIndex(batch_size=16, n_jobs=4).fit(X).kneighbors(Q, 7)
    c = KNNIndex(batch_size=1000, n_jobs=1).fit(X).kneighbors(Q, 7)
    for other in (b, c):
        assert np.array_equal(a[0], other[0]) and np.array_equal(a[1], other[1])


def test_head_equals_direct_query():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((100, 5)).astype(np.float32)
    idx = KNNIndex().fit(X, labels=rng.integers(0, 3, 100))
    big = idx.query(X[0], 20, exclude_id=0)
    small = idx.query(X[0], 5, exclude_id=0)
    assert big.head(5).neighbor_ids.tolist() == small.neighbor_ids.tolist()


def test_sklearn_params():
    idx = KNNIndex(kernel="cosine", batch_size=3)
    assert idx.get_params() == {"kernel": "cosine", "batch_size": 3, "n_jobs": None}


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.sampled_from(["euclidean", "cosine_distance"]),
       st.integers(0, 2**32 - 1), st.booleans())
def test_exactness_property(n, dim, kernel, seed, grid):
    rng = np.random.default_rng(seed)
    if grid:  # small integer grid forces many exact ties
        X = rng.integers(-2, 3, size=(n, dim)).astype(np.float32)
        X[np.all(X == 0, axis=1)] = 1
    else:
        X = rng.standard_normal((n, dim)).astype(np.float32)
    idx = KNNIndex(kernel=kernel).fit(X)
    k = int(rng.integers(1, n))
    q = int(rng.integers(0, n))
    nq = idx.query(X[q], k, exclude_id=q)
    ids, d, _ = knn_scan(X, X[q], k, kernel, exclude_id=q)
    np.testing.assert_allclose(nq.distances, d, rtol=1e-6, atol=1e-12)
    if not grid or kernel == "euclidean":
        assert nq.neighbor_ids.tolist() == ids.tolist()
    assert np.all(np.diff(nq.distances) >= 0)
    assert q not in nq.neighbor_ids
