"""Neighborhood statistics of a query point in representation space.

Three statistics over the k nearest training neighbors of a point whose
upstream prediction is ``pred``:

* mean distance to all k neighbors (dissimilarity; larger means sparser),
* mean distance to the neighbors labeled ``pred`` (absent when there are none),
* agreement: how many neighbors are labeled ``pred``.

The batch helpers take ``(m, k)`` arrays of neighbor distances and labels so
that a single ``max(k)`` query can be sliced to any smaller k.
"""

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._io import atomic_open
from .knn_index import KNNIndex
from .repr_store import correctness_labels

SWEEP_COLUMNS = ("k", "split", "mean_kde", "mean_kde_cond", "mean_agreement", "n_points")


@dataclass(frozen=True)
class NeighStats:
    mean_distance: float
    mean_same_class_distance: float | None
    agreement_count: int
    k: int


def kde_unconditional(nq):
    return float(np.mean(nq.distances))


def kde_conditional(nq, pred_label):
    same = nq.neighbor_labels == pred_label
    if not same.any():
        return None
    return float(np.mean(nq.distances[same]))


def agreement(nq, pred_label):
    return int(np.count_nonzero(nq.neighbor_labels == pred_label))


def neigh_stats(nq, pred_label):
    return NeighStats(kde_unconditional(nq), kde_conditional(nq, pred_label),
                      agreement(nq, pred_label), nq.k)


# --- batch forms -------------------------------------------------------------

def batch_kde(distances):
    return np.asarray(distances, dtype=np.float64).mean(axis=1)


def batch_kde_conditional(distances, neighbor_labels, pred_labels):
    """Per-row conditional mean distance; NaN marks rows with no matching neighbor."""
    same = neighbor_labels == np.asarray(pred_labels)[:, None]
    cnt = same.sum(axis=1)
    tot = np.where(same, distances, 0.0).sum(axis=1)
    out = np.full(len(cnt), np.nan)
    np.divide(tot, cnt, out=out, where=cnt > 0)
    return out


def batch_agreement(neighbor_labels, pred_labels):
    return (neighbor_labels == np.asarray(pred_labels)[:, None]).sum(axis=1)


def fill_absent(values):
    """Replace absent (NaN) conditional distances with a most-uncertain value.

    The fill is the largest observed value nudged one step up, or 1.0 when
    nothing was observed.
    """
    values = np.asarray(values, dtype=np.float64).copy()
    missing = np.isnan(values)
    if missing.any():
        top = np.nanmax(values) if (~missing).any() else 0.0
        values[missing] = np.nextafter(top, np.inf) if top > 0 else 1.0
    return values


def neighbor_table(index, rs, k, self_exclude=False):
    """Distances ``(m, k)`` and neighbor labels ``(m, k)`` for every point of ``rs``."""
    dist, pos = index.kneighbors(rs.vectors, k, exclude_ids=rs.ids if self_exclude else None)
    return dist, index.labels_[pos]


# --- sweep -------------------------------------------------------------------

def stats_sweep(query_set, index, k_values, self_exclude=False):
    """Mean neighborhood statistics per k, split by upstream correctness.

    A single query at ``max(k_values)`` is sliced to each smaller k. Returns a
    list of row dicts with the :data:`SWEEP_COLUMNS` keys. ``mean_agreement``
    is the mean agreement fraction (count / k).
    """
    k_values = sorted({int(k) for k in k_values})
    dist, nlab = neighbor_table(index, query_set, k_values[-1], self_exclude)
    correct = correctness_labels(query_set).astype(bool)
    preds = query_set.pred_labels
    rows = []
    for k in k_values:
        d, lab = dist[:, :k], nlab[:, :k]
        kde = batch_kde(d)
        cond = batch_kde_conditional(d, lab, preds)
        agree = batch_agreement(lab, preds) / k
        for split, mask in (("correct", correct), ("incorrect", ~correct)):
            n = int(mask.sum())
            c = cond[mask]
            c = c[~np.isnan(c)]
            rows.append({
                "k": k,
                "split": split,
                "mean_kde": float(kde[mask].mean()) if n else float("nan"),
                "mean_kde_cond": float(c.mean()) if c.size else float("nan"),
                "mean_agreement": float(agree[mask].mean()) if n else float("nan"),
                "n_points": n,
            })
    return rows


def write_sweep_csv(path, rows):
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, **{c: repr(r[c]) for c in ("mean_kde", "mean_kde_cond", "mean_agreement")}})


class NeighborhoodStats(TransformerMixin, BaseEstimator):
    """Transformer mapping points to ``[mean_distance, mean_same_class_distance, agreement]``.

    ``fit`` indexes the reference vectors and their labels; ``transform`` needs
    the upstream predictions of the points being transformed. Absent
    same-class distances are returned as NaN.
    """

    def __init__(self, k=200, kernel="euclidean"):
        self.k = k
        self.kernel = kernel

    def fit(self, X, y):
        self.index_ = KNNIndex(kernel=self.kernel).fit(X, labels=y)
        return self

    def transform(self, X, pred_labels, exclude_ids=None):
        check_is_fitted(self, "index_")
        dist, pos = self.index_.kneighbors(X, self.k, exclude_ids=exclude_ids)
        lab = self.index_.labels_[pos]
        return np.column_stack([
            batch_kde(dist),
            batch_kde_conditional(dist, lab, pred_labels),
            batch_agreement(lab, pred_labels).astype(np.float64),
        ])
