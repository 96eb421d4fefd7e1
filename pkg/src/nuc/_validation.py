"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .exceptions import ConsistencyError, DataError, ShapeError


def check_vectors(X, *, dim=None, name="X"):
    """Return ``X`` as a finite 2-D float64 array, optionally with a fixed width."""
    try:
        X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if dim is not None and X.shape[1] != dim:
        raise ShapeError(f"{name} has {X.shape[1]} features, expected {dim}")
    return X


def check_labels(y, *, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError(f"{name} must hold integer class ids")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise DataError(f"{name} must be non-negative class ids")
    return y


def check_probabilities(p, *, name="confidences"):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise DataError(f"{name} must lie in [0, 1]")
    return p


def check_binary(t, *, name="targets"):
    t = np.asarray(t)
    if t.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise DataError(f"{name} must be binary 0/1")
    return t.astype(np.int64)


def check_same_length(*arrays):
    try:
        check_consistent_length(*arrays)
    except ValueError as exc:
        raise ConsistencyError(str(exc)) from exc
