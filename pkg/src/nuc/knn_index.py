"""Exact k-nearest-neighbor search by batched full scan.

Candidates are preselected per query batch with a matrix product, then their
distances are recomputed directly in float64 and sorted by ``(distance, id)``.
When a candidate boundary is too close to call under the product's rounding
error the row falls back to a direct scan, so the result is always exact.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_vectors
from .exceptions import BuildError, QueryError, ShapeError

_EXTRA_CANDIDATES = 8
_REL_TOL = 1e-9


class DistanceKernel(str, Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine_distance"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        value = str(value).lower()
        if value in ("cosine", "cos"):
            return cls.COSINE
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown kernel {value!r}; use 'euclidean' or 'cosine_distance'") from None


@dataclass(frozen=True)
class NeighborQuery:
    """k nearest neighbors of one query, ascending by distance then id."""

    neighbor_ids: np.ndarray
    distances: np.ndarray
    neighbor_labels: np.ndarray
    neighbor_index: np.ndarray

    @property
    def k(self):
        return len(self.distances)

    def head(self, k):
        """The first ``k`` neighbors, equal to a direct k-NN query."""
        return NeighborQuery(self.neighbor_ids[:k], self.distances[:k],
                             self.neighbor_labels[:k], self.neighbor_index[:k])


def default_workers():
    cap = os.environ.get("NUC_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


class KNNIndex(BaseEstimator):
    """Exact kNN index over a fixed set of vectors.

    Parameters
    ----------
    kernel : {"euclidean", "cosine_distance"}
        Distance used for neighbor ranking.
    batch_size : int
        Number of queries scanned per matrix product.
    n_jobs : int or None
        Worker threads for batched queries. ``None`` reads ``NUC_THREADS``.
    """

    def __init__(self, kernel="euclidean", batch_size=256, n_jobs=None):
        self.kernel = kernel
        self.batch_size = batch_size
        self.n_jobs = n_jobs

    def fit(self, X, ids=None, labels=None):
        X = check_vectors(X)
        n = X.shape[0]
        self.kernel_ = DistanceKernel.parse(self.kernel)
        self.X_ = X
        self.ids_ = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if self.ids_.shape != (n,) or np.unique(self.ids_).size != n:
            raise BuildError("ids must be unique and one per vector")
        self.labels_ = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.sq_norms_ = np.einsum("ij,ij->i", X, X)
        self.norms_ = np.sqrt(self.sq_norms_)
        if self.kernel_ is DistanceKernel.COSINE:
            if np.any(self.norms_ == 0):
                raise BuildError("cosine distance is undefined for zero vectors")
            self.unit_ = X / self.norms_[:, None]
        self.id_to_pos_ = {int(i): p for p, i in enumerate(self.ids_)}
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def n_points(self):
        check_is_fitted(self, "X_")
        return self.X_.shape[0]

    # distance primitives --------------------------------------------------

    def _exact(self, rows, q):
        """Direct float64 distances from ``q`` (d,) to ``self.X_[rows]``."""
        Xr = self.X_[rows]
        if self.kernel_ is DistanceKernel.EUCLIDEAN:
            diff = Xr - q
            return np.sqrt(np.einsum("...j,...j->...", diff, diff))
        qn = np.sqrt(q @ q)
        cos = np.einsum("...j,j->...", Xr, q) / (self.norms_[rows] * qn)
        return np.clip(1.0 - cos, 0.0, 2.0)

    def _approx(self, Q):
        if self.kernel_ is DistanceKernel.EUCLIDEAN:
            qq = np.einsum("ij,ij->i", Q, Q)
            d2 = qq[:, None] + self.sq_norms_[None, :] - 2.0 * (Q @ self.X_.T)
            tol = _REL_TOL * (qq + self.sq_norms_.max()) + 1e-300
            return d2, tol
        qn = np.sqrt(np.einsum("ij,ij->i", Q, Q))
        return 1.0 - (Q / qn[:, None]) @ self.unit_.T, np.full(len(Q), _REL_TOL)

    def _scan_batch(self, Q, m):
        """Return positions (b, m) of the m nearest points per query, exactly ranked."""
        n = self.X_.shape[0]
        approx, tol = self._approx(Q)
        c = min(n, m + _EXTRA_CANDIDATES)
        if c < n:
            cand = np.argpartition(approx, c - 1, axis=1)[:, :c]
        else:
            cand = np.broadcast_to(np.arange(n), (len(Q), n))
        out = np.empty((len(Q), m), dtype=np.int64)
        dist = np.empty((len(Q), m), dtype=np.float64)
        for r in range(len(Q)):
            rows = cand[r]
            if c < n:
                vals = approx[r, rows]
                kth = np.partition(vals, m - 1)[m - 1]
                if vals.max() - kth <= 2.0 * tol[r]:
                    rows = np.arange(n)
            d = self._exact(rows, Q[r])
            order = np.lexsort((self.ids_[rows], d))[:m]
            out[r] = rows[order]
            dist[r] = d[order]
        return out, dist

    # public queries ---------------------------------------------------------

    def kneighbors(self, Q, k, exclude_ids=None):
        """Exact k nearest neighbors for every row of ``Q``.

        Parameters
        ----------
        Q : array of shape (m, dim)
        k : int
        exclude_ids : array of shape (m,), optional
            Per-query point id to drop from its own neighbor list. Use this when
            the queries are themselves members of the index.

        Returns
        -------
        distances : array of shape (m, k)
        positions : array of shape (m, k)
            Row positions into the indexed matrix.
        """
        check_is_fitted(self, "X_")
        Q = np.asarray(Q, dtype=np.float64)
        if Q.ndim == 1:
            Q = Q[None, :]
        if Q.ndim != 2 or Q.shape[1] != self.n_features_in_:
            raise ShapeError(f"queries have shape {Q.shape}, index dim is {self.n_features_in_}")
        Q = check_vectors(Q, name="queries")
        k = int(k)
        n = self.X_.shape[0]
        if k < 1:
            raise QueryError(f"k must be >= 1, got {k}")
        excl_pos = None
        if exclude_ids is not None:
            exclude_ids = np.asarray(exclude_ids, dtype=np.int64).reshape(-1)
            if exclude_ids.shape[0] != Q.shape[0]:
                raise ShapeError("exclude_ids must have one entry per query")
            excl_pos = np.array([self.id_to_pos_.get(int(i), -1) for i in exclude_ids])
            available = n - 1 if np.any(excl_pos >= 0) else n
        else:
            available = n
        if k > available:
            raise QueryError(f"k={k} exceeds the {available} points available for the query")
        if self.kernel_ is DistanceKernel.COSINE and np.any(np.einsum("ij,ij->i", Q, Q) == 0):
            raise QueryError("cosine distance is undefined for a zero query vector")
        m = min(n, k + 1) if excl_pos is not None else k

        starts = range(0, Q.shape[0], max(1, int(self.batch_size)))
        workers = self.n_jobs or default_workers()
        if workers > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda s: self._scan_batch(Q[s:s + self.batch_size], m), starts))
        else:
            parts = [self._scan_batch(Q[s:s + self.batch_size], m) for s in starts]
        pos = np.concatenate([p for p, _ in parts])
        dist = np.concatenate([d for _, d in parts])

        if excl_pos is not None:
            hit = pos == excl_pos[:, None]
            drop = np.where(hit.any(axis=1), hit.argmax(axis=1), m - 1)
            keep = np.ones_like(hit)
            keep[np.arange(len(pos)), drop] = False
            if m > k:
                pos = pos[keep].reshape(len(pos), k)
                dist = dist[keep].reshape(len(dist), k)
        return dist, pos

    def query(self, q, k, exclude_id=None):
        """Single-query convenience returning a :class:`NeighborQuery`."""
        excl = None if exclude_id is None else [exclude_id]
        dist, pos = self.kneighbors(np.asarray(q, dtype=np.float64).reshape(1, -1), k, excl)
        return self.as_query(dist[0], pos[0])

    def as_query(self, distances, positions):
        labels = (np.full(len(positions), -1, np.int64) if self.labels_ is None
                  else self.labels_[positions])
        return NeighborQuery(self.ids_[positions], distances, labels, positions)


def build_index(rs, kernel="euclidean", **kwargs):
    """Build an exact index over a :class:`~nuc.repr_store.ReprSet`."""
    return KNNIndex(kernel=kernel, **kwargs).fit(rs.vectors, ids=rs.ids, labels=rs.labels)
