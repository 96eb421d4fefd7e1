"""Neighborhood uncertainty classifier.

A small permutation-invariant network scores the probability that the
upstream classifier is wrong about a point, from the point's k nearest
training neighbors and the upstream confidence.

Each neighbor contributes one feature row ``[distance, agrees]`` where
``agrees`` is 1 when the neighbor's label equals the upstream prediction.
Layer 1 maps every row linearly and sums over the neighbors; each further
layer is a linear map followed by ReLU; the upstream confidence is appended
to the last hidden vector before a linear head with two logits
``[correct, error]``. ``u`` is the softmax probability of ``error``.

Everything runs in float64 numpy with hand-written gradients.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._io import atomic_open
from ._validation import check_binary, check_labels, check_probabilities, check_vectors
from .exceptions import DegenerateTaskError, FormatError, NucNumericError, ShapeError
from .knn_index import KNNIndex
from .neigh_stats import neighbor_table
from .repr_store import correctness_labels

FEATURE_SPECS = {"dist+flag+conf": True, "dist+flag": False}
CHECKPOINT_VERSION = 1
N_ROW_FEATURES = 2


@dataclass(frozen=True)
class NeighborhoodFeatures:
    per_neighbor: np.ndarray  # (k, 2): distance, agreement flag
    global_: np.ndarray       # (1,): upstream confidence

    @property
    def k(self):
        return self.per_neighbor.shape[0]


def featurize(nq, pred_label, confidence):
    flags = (nq.neighbor_labels == pred_label).astype(np.float64)
    rows = np.column_stack([np.asarray(nq.distances, dtype=np.float64), flags])
    return NeighborhoodFeatures(rows, np.array([float(confidence)]))


def batch_features(distances, neighbor_labels, pred_labels):
    """Stack per-neighbor rows for many points into an ``(m, k, 2)`` array."""
    flags = (neighbor_labels == np.asarray(pred_labels)[:, None]).astype(np.float64)
    return np.stack([np.asarray(distances, dtype=np.float64), flags], axis=-1)


@dataclass(frozen=True)
class TrainConfig:
    k: int = 10
    learning_rate: float = 1e-3
    annealed_learning_rate: float = 1e-4
    anneal_step: int = 40000
    epochs: int = 1
    seed: int = 0
    batch_size: int = 64
    hidden_width: int = 64
    n_layers: int = 2
    use_confidence: bool = True
    kernel: str = "euclidean"

    def __post_init__(self):
        for name in ("k", "epochs", "batch_size", "hidden_width", "n_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        if self.anneal_step < 0:
            raise ValueError("anneal_step must be >= 0")
        if not (self.learning_rate > 0 and self.annealed_learning_rate > 0):
            raise ValueError("learning rates must be positive")

    def lr_at(self, step):
        return self.learning_rate if step < self.anneal_step else self.annealed_learning_rate


@dataclass
class NucNetwork:
    """Weights of the scorer.

    ``layers[0]`` maps a 2-feature neighbor row to the hidden width; later
    layers are hidden-to-hidden. The head maps the last hidden vector (plus the
    confidence when ``use_confidence``) to two logits.
    """

    layers: list
    head: tuple
    k: int
    use_confidence: bool = True
    kernel: str = "euclidean"
    history: list = field(default_factory=list, compare=False)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def hidden_width(self):
        return self.layers[0][0].shape[1]

    @property
    def feature_spec(self):
        return "dist+flag+conf" if self.use_confidence else "dist+flag"

    def params(self):
        out = [a for W, b in self.layers for a in (W, b)]
        return out + [self.head[0], self.head[1]]

    def with_params(self, flat):
        flat = list(flat)
        layers = [(flat[2 * i], flat[2 * i + 1]) for i in range(self.n_layers)]
        return replace(self, layers=layers, head=(flat[-2], flat[-1]), history=list(self.history))


def init_network(k, hidden_width=64, n_layers=2, use_confidence=True, rng=None,
                 feature_mean=None, feature_scale=None, kernel="euclidean"):
    """Random initial weights.

    When training features are supplied, layer 1 is scaled and offset so the
    summed neighbor embedding starts centered with unit spread for that k.
    """
    rng = np.random.default_rng(rng)
    H = int(hidden_width)
    W1 = rng.standard_normal((N_ROW_FEATURES, H))
    b1 = np.zeros(H)
    if feature_mean is not None:
        scale = np.where(np.asarray(feature_scale) > 0, feature_scale, 1.0)
        W1 = W1 / (k * scale[:, None])
        b1 = -(np.asarray(feature_mean) @ W1)
    layers = [(W1, b1)]
    for _ in range(int(n_layers) - 1):
        layers.append((rng.standard_normal((H, H)) * np.sqrt(2.0 / H), np.zeros(H)))
    n_in = H + (1 if use_confidence else 0)
    head = (rng.standard_normal((n_in, 2)) * np.sqrt(1.0 / n_in), np.zeros(2))
    return NucNetwork(layers, head, int(k), bool(use_confidence), kernel)


# --- forward / loss / backward ------------------------------------------------

def _check_batch(net, X, s):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != N_ROW_FEATURES:
        raise ShapeError(f"neighbor features must have shape (m, k, 2), got {X.shape}")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.shape[0] != X.shape[0]:
        raise ShapeError("one confidence value is required per point")
    return X, s


def forward_batch(net, X, s):
    """Logits ``(m, 2)`` and the activation cache for :func:`backward_batch`."""
    X, s = _check_batch(net, X, s)
    W1, b1 = net.layers[0]
    a = np.einsum("mkf,fh->mh", X, W1) + X.shape[1] * b1
    acts, pre = [a], []
    for W, b in net.layers[1:]:
        z = a @ W + b
        a = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(a)
    c = np.column_stack([a, s]) if net.use_confidence else a
    logits = c @ net.head[0] + net.head[1]
    return logits, (X, s, acts, pre, c)


def _log_softmax(logits):
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def error_probability(logits):
    """``u`` = softmax(logits)[error], computed stably."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.exp(_log_softmax(np.atleast_2d(logits))[:, 1])


def forward(net, f):
    """Score one :class:`NeighborhoodFeatures`; returns ``(logits, u)``."""
    logits, _ = forward_batch(net, f.per_neighbor[None], f.global_[:1])
    return logits[0], float(error_probability(logits)[0])


def cross_entropy(logits, t):
    """Mean two-class cross entropy; ``t=1`` means the upstream model was correct."""
    logp = _log_softmax(np.atleast_2d(logits))
    t = np.asarray(t).reshape(-1)
    target = 1 - t
    return float(-logp[np.arange(len(t)), target].mean())


def loss(u, t):
    """Cross entropy of error probability ``u`` against correctness flag ``t``.

    Evaluated through the logit ``log(u) - log(1-u)`` with softplus, so it never
    takes ``log(0)`` of an intermediate.
    """
    u = float(u)
    with np.errstate(divide="ignore"):
        z = np.log(u) - np.log1p(-u)
    return float(np.logaddexp(0.0, z if t else -z))


def backward_batch(net, X, s, t):
    """Mean loss and its gradient w.r.t. every parameter, in :meth:`NucNetwork.params` order."""
    logits, (X, s, acts, pre, c) = forward_batch(net, X, s)
    t = np.asarray(t).reshape(-1)
    m = X.shape[0]
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(m), 1 - t].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(m), 1 - t] -= 1.0
    dlogits /= m

    Wh = net.head[0]
    grads_head = [c.T @ dlogits, dlogits.sum(axis=0)]
    da = (dlogits @ Wh.T)[:, :net.hidden_width]
    grads_layers = []
    for li in range(net.n_layers - 1, 0, -1):
        W = net.layers[li][0]
        dz = da * (pre[li - 1] > 0)
        grads_layers.append((acts[li - 1].T @ dz, dz.sum(axis=0)))
        da = dz @ W.T
    dW1 = np.einsum("mkf,mh->fh", X, da)
    db1 = X.shape[1] * da.sum(axis=0)
    grads_layers.append((dW1, db1))
    grads = [g for pair in reversed(grads_layers) for g in pair]
    return value, grads + grads_head


def backward(net, f, t):
    """Gradients of the loss for a single point."""
    return backward_batch(net, f.per_neighbor[None], f.global_[:1], [int(t)])[1]


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    b1, b2, step = state.beta1, state.beta2, state.step + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1 ** step, 1 - b2 ** step
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new, replace(state, m=m, v=v, step=step)


# --- training and scoring -------------------------------------------------------

def train_on_features(X, s, t, cfg):
    """Train a fresh network on precomputed neighbor features."""
    t = check_binary(t)
    if t.min() == t.max():
        raise DegenerateTaskError(
            "all correctness targets are identical; the upstream model must make some mistakes "
            "on the training data for the error classifier to learn anything")
    X, s = np.asarray(X, dtype=np.float64), np.asarray(s, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    rows = X.reshape(-1, N_ROW_FEATURES)
    net = init_network(X.shape[1], cfg.hidden_width, cfg.n_layers, cfg.use_confidence, rng,
                       feature_mean=rows.mean(axis=0), feature_scale=rows.std(axis=0),
                       kernel=cfg.kernel)
    params = net.params()
    state = AdamState.zeros_like(params)
    n = len(t)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = backward_batch(net, X[idx], s[idx], t[idx])
            params, state = adam_step(state, params, grads, cfg.lr_at(state.step))
            net = net.with_params(params)
            total += value * len(idx)
        history.append(total / n)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise NucNumericError("training produced non-finite weights")
    net.history = history
    return net


def train(train_set, index, cfg=TrainConfig()):
    """Fit the scorer on ``train_set``, whose points are members of ``index``.

    Each point's own entry is excluded from its neighbor list.
    """
    dist, nlab = neighbor_table(index, train_set, cfg.k, self_exclude=True)
    X = batch_features(dist, nlab, train_set.pred_labels)
    return train_on_features(X, train_set.confidences, correctness_labels(train_set), cfg)


def score_features(net, X, s):
    logits, _ = forward_batch(net, X, s)
    return error_probability(logits)


def score(net, index, query_set, k=None):
    """Error probability for each point of ``query_set`` (not members of the index)."""
    k = net.k if k is None else int(k)
    dist, nlab = neighbor_table(index, query_set, k)
    return score_features(net, batch_features(dist, nlab, query_set.pred_labels),
                          query_set.confidences)


# --- checkpoints ----------------------------------------------------------------

def network_to_dict(net):
    return {
        "format_version": CHECKPOINT_VERSION,
        "k": net.k,
        "L": net.n_layers,
        "hidden_width": net.hidden_width,
        "feature_spec": net.feature_spec,
        "kernel": net.kernel,
        "layers": [{"weight": W.tolist(), "bias": b.tolist()} for W, b in net.layers],
        "head": {"weight": net.head[0].tolist(), "bias": net.head[1].tolist()},
    }


def network_from_dict(d):
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {d.get('format_version')!r}")
    spec = d.get("feature_spec")
    if spec not in FEATURE_SPECS:
        raise FormatError(f"unknown feature_spec {spec!r}; known: {sorted(FEATURE_SPECS)}")
    try:
        layers = [(np.array(l["weight"], dtype=np.float64), np.array(l["bias"], dtype=np.float64))
                  for l in d["layers"]]
        head = (np.array(d["head"]["weight"], dtype=np.float64),
                np.array(d["head"]["bias"], dtype=np.float64))
        net = NucNetwork(layers, head, int(d["k"]), FEATURE_SPECS[spec], d.get("kernel", "euclidean"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    H = net.hidden_width
    ok = (len(layers) == d["L"] == int(d["L"]) and H == d["hidden_width"]
          and layers[0][0].shape == (N_ROW_FEATURES, H)
          and all(W.shape == (H, H) and b.shape == (H,) for W, b in layers[1:])
          and head[0].shape == (H + int(net.use_confidence), 2) and head[1].shape == (2,))
    if not ok:
        raise FormatError("checkpoint weight shapes are inconsistent")
    if not all(np.all(np.isfinite(p)) for p in net.params()):
        raise FormatError("checkpoint contains non-finite weights")
    return net


def save_checkpoint(path, net):
    with atomic_open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_dict(net), fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return network_from_dict(d)


# --- estimator ---------------------------------------------------------------

class NUCClassifier(BaseEstimator):
    """Estimator wrapper: fit on training representations, score new points.

    Parameters mirror :class:`TrainConfig`. ``fit`` indexes ``X`` and trains
    with self-excluded neighbor queries; ``predict_proba`` returns columns
    ``[P(correct), P(error)]`` for the upstream prediction of each row.
    """

    def __init__(self, k=10, hidden_width=64, n_layers=2, learning_rate=1e-3,
                 annealed_learning_rate=1e-4, anneal_step=40000, epochs=1, batch_size=64,
                 use_confidence=True, kernel="euclidean", random_state=0):
        self.k = k
        self.hidden_width = hidden_width
        self.n_layers = n_layers
        self.learning_rate = learning_rate
        self.annealed_learning_rate = annealed_learning_rate
        self.anneal_step = anneal_step
        self.epochs = epochs
        self.batch_size = batch_size
        self.use_confidence = use_confidence
        self.kernel = kernel
        self.random_state = random_state

    def _config(self):
        return TrainConfig(k=self.k, learning_rate=self.learning_rate,
                           annealed_learning_rate=self.annealed_learning_rate,
                           anneal_step=self.anneal_step, epochs=self.epochs,
                           seed=self.random_state, batch_size=self.batch_size,
                           hidden_width=self.hidden_width, n_layers=self.n_layers,
                           use_confidence=self.use_confidence, kernel=self.kernel)

    def fit(self, X, y, pred_labels, confidences):
        X = check_vectors(X)
        y = check_labels(y)
        pred_labels = check_labels(pred_labels, name="pred_labels")
        confidences = check_probabilities(confidences)
        self.index_ = KNNIndex(kernel=self.kernel).fit(X, labels=y)
        dist, pos = self.index_.kneighbors(X, self.k, exclude_ids=self.index_.ids_)
        feats = batch_features(dist, y[pos], pred_labels)
        self.network_ = train_on_features(feats, confidences, (y == pred_labels).astype(int),
                                          self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X, pred_labels, confidences):
        """Probability that the upstream prediction is wrong."""
        check_is_fitted(self, "network_")
        X = check_vectors(X, dim=self.n_features_in_)
        dist, pos = self.index_.kneighbors(X, self.k)
        feats = batch_features(dist, self.index_.labels_[pos], check_labels(pred_labels))
        return score_features(self.network_, feats, check_probabilities(confidences))

    def predict_proba(self, X, pred_labels, confidences):
        u = self.score_samples(X, pred_labels, confidences)
        return np.column_stack([1.0 - u, u])

    def predict(self, X, pred_labels, confidences):
        """1 where an upstream error is predicted (``u > 0.5``)."""
        return (self.score_samples(X, pred_labels, confidences) > 0.5).astype(np.int64)


def k_sweep(train_set, test_set, index, k_values, cfg=TrainConfig()):
    """Misclassification AUROC on ``test_set`` for each k, with and without the
    confidence input. Both variants are retrained from scratch at every k.

    Returns rows ``{"k", "auroc_with_conf", "auroc_without_conf"}``.
    """
    from .metrics import auroc

    k_values = sorted({int(k) for k in k_values})
    kmax = k_values[-1]
    dt, lt = neighbor_table(index, train_set, kmax, self_exclude=True)
    dq, lq = neighbor_table(index, test_set, kmax)
    t = correctness_labels(train_set)
    errors = 1 - correctness_labels(test_set)
    rows = []
    for k in k_values:
        Xt = batch_features(dt[:, :k], lt[:, :k], train_set.pred_labels)
        Xq = batch_features(dq[:, :k], lq[:, :k], test_set.pred_labels)
        row = {"k": k}
        for use_conf, col in ((True, "auroc_with_conf"), (False, "auroc_without_conf")):
            net = train_on_features(Xt, train_set.confidences, t,
                                    replace(cfg, k=k, use_confidence=use_conf))
            row[col] = auroc(score_features(net, Xq, test_set.confidences), errors)
        rows.append(row)
    return rows
