"""Representation sets and their on-disk formats.

A representation set is stored as two files sharing a path prefix:

``<prefix>.vec``
    Binary, little-endian. Magic ``b"NUCR"``, ``u16`` version (1), ``u32``
    dim, ``u64`` count, then ``count * dim`` float32 values in row-major order.
``<prefix>.csv``
    UTF-8 CSV with header ``id,label,pred_label,confidence``, one row per vector
    in vector-file order.

An optional ``<prefix>.logits.vec`` in the same binary layout holds the
upstream model's per-class logits (dim = number of classes).
"""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_open
from ._validation import check_labels
from .exceptions import ConsistencyError, DataError, FormatError

MAGIC = b"NUCR"
VERSION = 1
_HEADER = struct.Struct("<4sHIQ")
META_COLUMNS = ("id", "label", "pred_label", "confidence")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ReprSet:
    """Representation vectors with ground truth and upstream predictions.

    Parameters
    ----------
    vectors : array of shape (count, dim), float32
    labels : array of shape (count,)
        Ground-truth class ids.
    pred_labels : array of shape (count,)
        The upstream model's predicted class ids.
    confidences : array of shape (count,)
        The upstream model's softmax probability of its prediction.
    ids : array of shape (count,), optional
        Unique point ids; defaults to ``0..count-1``.
    logits : array of shape (count, n_classes), optional
        Upstream per-class logits, needed only for temperature calibration.
    """

    vectors: np.ndarray
    labels: np.ndarray
    pred_labels: np.ndarray
    confidences: np.ndarray
    ids: np.ndarray = None
    logits: np.ndarray = field(default=None)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise DataError(f"vectors must be a non-empty 2-D matrix, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise DataError("vectors contain NaN or Inf")
        n = vectors.shape[0]
        labels = check_labels(self.labels, name="labels")
        pred_labels = check_labels(self.pred_labels, name="pred_labels")
        confidences = np.asarray(self.confidences, dtype=np.float64)
        ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for name, arr in (("labels", labels), ("pred_labels", pred_labels),
                          ("confidences", confidences), ("ids", ids)):
            if arr.shape != (n,):
                raise ConsistencyError(f"{name} has length {arr.shape[0] if arr.ndim else 0}, expected {n}")
        if not np.all(np.isfinite(confidences)) or np.any((confidences < 0) | (confidences > 1)):
            raise DataError("confidences must lie in [0, 1]")
        if np.unique(ids).size != n:
            raise DataError("ids must be unique")
        logits = self.logits
        if logits is not None:
            logits = np.asarray(logits, dtype=np.float32)
            if logits.ndim != 2 or logits.shape[0] != n:
                raise ConsistencyError(f"logits must have {n} rows, got shape {logits.shape}")
            if not np.all(np.isfinite(logits)):
                raise DataError("logits contain NaN or Inf")
            logits = _frozen(logits)
        set_ = object.__setattr__
        set_(self, "vectors", _frozen(vectors))
        set_(self, "labels", _frozen(labels))
        set_(self, "pred_labels", _frozen(pred_labels))
        set_(self, "confidences", _frozen(confidences))
        set_(self, "ids", _frozen(ids))
        set_(self, "logits", logits)

    @property
    def count(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.count

    def subset(self, rows):
        """Return a new set restricted to ``rows`` (integer positions or boolean mask)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return ReprSet(
            self.vectors[rows], self.labels[rows], self.pred_labels[rows],
            self.confidences[rows], self.ids[rows],
            None if self.logits is None else self.logits[rows],
        )


def correctness_labels(rs):
    """Return 1 where the upstream prediction matches the ground truth, else 0."""
    return (rs.labels == rs.pred_labels).astype(np.int64)


# --- binary matrix format -------------------------------------------------

def write_matrix(path, matrix):
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {matrix.shape}")
    count, dim = matrix.shape
    with atomic_open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, count))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_matrix(path, mmap=False):
    """Read a ``NUCR`` matrix file. With ``mmap=True`` the data is memory-mapped."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * dim * count
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: size {actual} bytes, header implies {expected}")
    if mmap:
        data = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(count, dim))
    else:
        data = np.fromfile(path, dtype="<f4", offset=_HEADER.size, count=dim * count)
        data = data.reshape(count, dim)
    return data.astype(np.float32, copy=False)


# --- metadata CSV ----------------------------------------------------------

def write_metadata(path, rs):
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_COLUMNS)
        for i, y, p, c in zip(rs.ids.tolist(), rs.labels.tolist(),
                              rs.pred_labels.tolist(), rs.confidences.tolist()):
            w.writerow((i, y, p, repr(c)))


def read_metadata(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != META_COLUMNS:
            raise FormatError(f"{path}: header must be {','.join(META_COLUMNS)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        return (np.empty(0, np.int64),) * 3 + (np.empty(0),)
    ids, labels, preds, conf = zip(*rows)
    return (np.array(ids, np.int64), np.array(labels, np.int64),
            np.array(preds, np.int64), np.array(conf, np.float64))


# --- whole sets --------------------------------------------------------------

def dataset_paths(prefix):
    prefix = str(prefix)
    return Path(prefix + ".vec"), Path(prefix + ".csv"), Path(prefix + ".logits.vec")


def load_repr_set(vectors_path, meta_path, logits_path=None):
    """Load and validate a representation set from its vector and metadata files."""
    vectors = read_matrix(vectors_path)
    ids, labels, preds, conf = read_metadata(meta_path)
    if len(ids) != vectors.shape[0]:
        raise ConsistencyError(
            f"{vectors_path} holds {vectors.shape[0]} vectors but {meta_path} has {len(ids)} rows")
    logits = None
    if logits_path is not None:
        logits = read_matrix(logits_path)
        if logits.shape[0] != vectors.shape[0]:
            raise ConsistencyError(
                f"{logits_path} holds {logits.shape[0]} rows, expected {vectors.shape[0]}")
    return ReprSet(vectors, labels, preds, conf, ids, logits)


def write_repr_set(vectors_path, meta_path, rs, logits_path=None):
    write_matrix(vectors_path, rs.vectors)
    write_metadata(meta_path, rs)
    if logits_path is not None and rs.logits is not None:
        write_matrix(logits_path, rs.logits)


def load_dataset(prefix):
    """Load ``<prefix>.vec`` / ``<prefix>.csv`` plus ``<prefix>.logits.vec`` when present."""
    vec, meta, logits = dataset_paths(prefix)
    return load_repr_set(vec, meta, logits if logits.exists() else None)


def save_dataset(prefix, rs):
    vec, meta, logits = dataset_paths(prefix)
    write_repr_set(vec, meta, rs, logits)
    return [vec, meta] + ([logits] if rs.logits is not None else [])
