"""Comparison scorers. Every score is oriented so that higher means more uncertain."""

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_vectors
from .exceptions import DataError, NucNumericError, UnsupportedInputError
from .neigh_stats import (batch_agreement, batch_kde, batch_kde_conditional, fill_absent,
                          neighbor_table)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
T_BOUNDS = (0.05, 20.0)
T_TOL = 1e-4


def softmax_score(rs):
    """``1 - s`` where ``s`` is the upstream confidence in its prediction."""
    return 1.0 - np.asarray(rs.confidences, dtype=np.float64)


# --- temperature scaling -----------------------------------------------------------

def temperature_nll(logits, labels, T):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits / T)``."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / T, axis=1)
    return float(-logp[np.arange(len(labels)), labels].mean())


def golden_section(f, lo, hi, tol):
    """Minimize a unimodal ``f`` on ``[lo, hi]`` until the bracket is narrower than ``tol``."""
    a, b = float(lo), float(hi)
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


class TemperatureScaler(BaseEstimator):
    """Single-temperature softmax calibration.

    ``fit`` chooses ``T`` in ``bounds`` minimizing the NLL of held-out labels
    by golden-section search. Because the NLL is convex in ``1/T`` it is
    unimodal in ``T``.
    """

    def __init__(self, bounds=T_BOUNDS, tol=T_TOL):
        self.bounds = bounds
        self.tol = tol

    def fit(self, logits, y):
        if logits is None:
            raise UnsupportedInputError("temperature scaling needs per-class logits")
        logits = check_vectors(logits, name="logits")
        y = check_labels(y)
        if len(y) != len(logits):
            raise DataError("logits and labels differ in length")
        if y.max() >= logits.shape[1]:
            raise DataError(f"label {y.max()} is outside the {logits.shape[1]} logit columns")
        self.temperature_ = golden_section(lambda T: temperature_nll(logits, y, T),
                                           *self.bounds, self.tol)
        return self

    def predict_proba(self, logits):
        check_is_fitted(self, "temperature_")
        return softmax(check_vectors(logits, name="logits") / self.temperature_, axis=1)

    def predict(self, logits):
        return self.predict_proba(logits).argmax(axis=1)

    def score_samples(self, logits):
        """Uncertainty ``1 - max calibrated probability``."""
        return 1.0 - self.predict_proba(logits).max(axis=1)


def fit_temperature(logits, labels, **kwargs):
    return TemperatureScaler(**kwargs).fit(logits, labels)


def calibrated_softmax_score(model, rs):
    if rs.logits is None:
        raise UnsupportedInputError("this representation set carries no logits")
    return model.score_samples(rs.logits)


# --- Mahalanobis -----------------------------------------------------------------

class MahalanobisScorer(BaseEstimator):
    """Distance to the predicted class mean under a covariance tied across classes.

    The tied covariance is the class-centered scatter divided by ``N - C``,
    inverted after adding ``reg * trace / dim`` to the diagonal.
    """

    def __init__(self, reg=1e-6):
        self.reg = reg

    def fit(self, X, y):
        X = check_vectors(X)
        y = check_labels(y)
        classes, counts = np.unique(y, return_counts=True)
        if np.any(counts < 2):
            raise DataError(f"classes {classes[counts < 2].tolist()} have fewer than 2 points")
        means = np.stack([X[y == c].mean(axis=0) for c in classes])
        centered = X - means[np.searchsorted(classes, y)]
        dof = len(X) - len(classes)
        if dof < 1:
            raise DataError("need more points than classes to estimate a covariance")
        cov = centered.T @ centered / dof
        dim = cov.shape[0]
        lam = self.reg * np.trace(cov) / dim
        reg_cov = cov + lam * np.eye(dim)
        cond = np.linalg.cond(reg_cov)
        if not np.isfinite(cond) or cond > 1e15:
            raise NucNumericError(f"tied covariance is singular (condition estimate {cond:.3g})")
        self.classes_ = classes
        self.means_ = means
        self.covariance_ = cov
        self.precision_ = np.linalg.inv(reg_cov)
        self.precision_ = 0.5 * (self.precision_ + self.precision_.T)
        self.n_features_in_ = dim
        return self

    def score_samples(self, X, pred_labels):
        check_is_fitted(self, "precision_")
        X = check_vectors(X, dim=self.n_features_in_)
        pred_labels = check_labels(pred_labels)
        pos = np.searchsorted(self.classes_, pred_labels)
        pos = np.minimum(pos, len(self.classes_) - 1)
        unknown = self.classes_[pos] != pred_labels
        if unknown.any():
            raise KeyError(f"predicted classes {np.unique(pred_labels[unknown]).tolist()} "
                           "were not seen when fitting")
        diff = X - self.means_[pos]
        d2 = np.einsum("ij,jk,ik->i", diff, self.precision_, diff)
        return np.sqrt(np.maximum(d2, 0.0))


def fit_mahalanobis(train, **kwargs):
    return MahalanobisScorer(**kwargs).fit(train.vectors, train.labels)


def mahalanobis_score(model, rs):
    return model.score_samples(rs.vectors, rs.pred_labels)


# --- neighborhood statistics --------------------------------------------------------

KDE_VARIANTS = ("kde1", "kde2", "kde3")


def kde_scores_from_table(distances, neighbor_labels, pred_labels, variant):
    if variant == "kde1":
        return batch_kde(distances)
    if variant == "kde2":
        return fill_absent(batch_kde_conditional(distances, neighbor_labels, pred_labels))
    if variant == "kde3":
        return -batch_agreement(neighbor_labels, pred_labels).astype(np.float64)
    raise ValueError(f"unknown variant {variant!r}; expected one of {KDE_VARIANTS}")


def kde_baseline_scores(index, query_set, variant, k=200):
    """Neighborhood-statistic scores: mean distance (kde1), same-class mean distance
    (kde2), or negated agreement count (kde3)."""
    dist, nlab = neighbor_table(index, query_set, k)
    return kde_scores_from_table(dist, nlab, query_set.pred_labels, variant)
