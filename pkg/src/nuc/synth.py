"""Synthetic representation benchmarks with planted errors and planted OOD clusters.

Class ``c`` draws points from ``N(center_c, I)``. A fraction of every class
("overlap" points) is instead drawn from ``N(midpoint, overlap_scale**2 I)``
around the midpoint between ``center_c`` and a random other center. The wider
spread puts them in sparse regions of the space; a linear softmax head fit on the training points
gets roughly half of those wrong, so upstream errors concentrate there. OOD
clusters sit at least ``ood_offset`` away from every class center and carry
the sentinel label ``n_classes``.
"""

import warnings
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import softmax
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .repr_store import ReprSet


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 20
    dim: int = 64
    n_train_per_class: int = 500
    n_test_per_class: int = 100
    separation: float = 6.0
    overlap: float = 0.1
    overlap_scale: float = 1.5
    n_ood_clusters: int = 2
    n_ood_per_cluster: int = 500
    ood_offset: float = 20.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "dim", "n_train_per_class", "n_test_per_class"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.n_ood_clusters < 0 or self.n_ood_per_cluster < 0:
            raise ValueError("OOD counts must be non-negative")
        if not self.separation > 0:
            raise ValueError("separation must be positive")
        if not 0.0 <= self.overlap <= 0.5:
            raise ValueError("overlap must lie in [0, 0.5]")
        if not self.overlap_scale > 0:
            raise ValueError("overlap_scale must be positive")
        if self.ood_offset < 0:
            raise ValueError("ood_offset must be non-negative")

    @classmethod
    def from_mapping(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown synth config key {key!r}")
            conv = int if types[key] in (int, "int") else float
            kwargs[key] = conv(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        """Read ``key=value`` lines; blank lines and ``#`` comments are ignored."""
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
        return cls.from_mapping(values)


@dataclass(frozen=True)
class SynthData:
    train: ReprSet
    test_in: ReprSet
    test_ood: ReprSet | None
    centers: np.ndarray
    ood_centers: np.ndarray


def _class_centers(rng, cfg):
    raw = rng.standard_normal((cfg.n_classes, cfg.dim))
    diff = raw[:, None, :] - raw[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    mean_pair = d[np.triu_indices(cfg.n_classes, 1)].mean()
    return raw * (cfg.separation / mean_pair)


def _ood_centers(rng, cfg, centers):
    origin = centers.mean(axis=0)
    out = []
    for _ in range(cfg.n_ood_clusters):
        u = rng.standard_normal(cfg.dim)
        u /= np.linalg.norm(u)
        r = max(cfg.ood_offset, 1.0)
        while np.linalg.norm(centers - (origin + r * u), axis=1).min() < cfg.ood_offset:
            r *= 1.05
        out.append(origin + r * u)
    return np.array(out).reshape(-1, cfg.dim)


def _draw_split(rng, cfg, centers, per_class):
    n_overlap = int(round(cfg.overlap * per_class))
    X, y = [], []
    for c in range(cfg.n_classes):
        core = centers[c] + rng.standard_normal((per_class - n_overlap, cfg.dim))
        others = rng.integers(0, cfg.n_classes - 1, size=n_overlap)
        others = others + (others >= c)
        mid = 0.5 * (centers[c] + centers[others])
        ov = mid + cfg.overlap_scale * rng.standard_normal((n_overlap, cfg.dim))
        X.extend([core, ov])
        y.append(np.full(per_class, c))
    return np.vstack(X).astype(np.float32), np.concatenate(y)


def _upstream(head, X, labels, id_start):
    logits = head.decision_function(X.astype(np.float64))
    probs = softmax(logits, axis=1)
    pred = head.classes_[probs.argmax(axis=1)]
    conf = probs.max(axis=1)
    ids = np.arange(id_start, id_start + len(X))
    return ReprSet(X, labels, pred, conf, ids, logits.astype(np.float32))


def generate(cfg=SynthConfig()):
    """Draw train / in-distribution test / OOD sets with upstream predictions and logits."""
    rng = np.random.default_rng(cfg.seed)
    centers = _class_centers(rng, cfg)
    X_tr, y_tr = _draw_split(rng, cfg, centers, cfg.n_train_per_class)
    X_te, y_te = _draw_split(rng, cfg, centers, cfg.n_test_per_class)
    ood_centers = _ood_centers(rng, cfg, centers)
    X_ood = [c + rng.standard_normal((cfg.n_ood_per_cluster, cfg.dim)) for c in ood_centers]

    head = LogisticRegression(max_iter=2000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        head.fit(X_tr.astype(np.float64), y_tr)

    train = _upstream(head, X_tr, y_tr, 0)
    if np.all(train.labels == train.pred_labels):
        warnings.warn("the upstream model makes no training errors; the error classifier "
                      "needs mistakes to learn from (raise overlap or lower separation)",
                      stacklevel=2)
    test_in = _upstream(head, X_te, y_te, len(X_tr))
    test_ood = None
    if X_ood and cfg.n_ood_per_cluster > 0:
        X_ood = np.vstack(X_ood).astype(np.float32)
        test_ood = _upstream(head, X_ood, np.full(len(X_ood), cfg.n_classes),
                             len(X_tr) + len(X_te))
    return SynthData(train, test_in, test_ood, centers, ood_centers)


def split(rs, fractions, seed=0):
    """Class-stratified seeded partition of ``rs`` into ``len(fractions)`` parts."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    bounds = np.cumsum(fractions)
    for c in np.unique(rs.labels):
        rows = rng.permutation(np.flatnonzero(rs.labels == c))
        cuts = np.rint(bounds * len(rows)).astype(int)
        for i, chunk in enumerate(np.split(rows, cuts[:-1])):
            parts[i].append(chunk)
    out = []
    for i, chunks in enumerate(parts):
        rows = np.sort(np.concatenate(chunks))
        if rows.size == 0:
            raise ValueError(f"split part {i} is empty")
        out.append(rs.subset(rows))
    return out
