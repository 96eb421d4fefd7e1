"""Threshold-free ranking metrics.

Conventions: AUROC uses midranks, so tied pairs count one half. AUPR is average
precision with one step per distinct score (tied scores enter together).
"""

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_open
from .exceptions import UndefinedMetricError

REPORT_COLUMNS = ("task", "method", "auroc", "aupr_out", "aupr_in", "n_pos", "n_neg")


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary 0/1")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("both classes must be present")
    return scores, labels, n_pos, labels.size - n_pos


def auroc(scores, labels):
    """P(score of a positive > score of a negative) + 0.5 P(tie); positives are label 1."""
    scores, labels, n_pos, n_neg = _check(scores, labels)
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels):
    """Area under the precision-recall curve for label 1 as the positive class."""
    scores, labels, n_pos, _ = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    gained = np.diff(np.r_[0, tp])
    return math.fsum(gained * precision) / n_pos


def aupr(scores, labels, positive_class="out"):
    """AUPR with ``labels`` 1 = out/error. ``positive_class="in"`` flips both the
    positive class and the score orientation."""
    if positive_class == "out":
        return average_precision(scores, labels)
    if positive_class == "in":
        return average_precision(-np.asarray(scores, dtype=np.float64), 1 - np.asarray(labels))
    raise ValueError(f"positive_class must be 'in' or 'out', got {positive_class!r}")


@dataclass(frozen=True)
class EvalReport:
    task: str
    method: str
    auroc: float
    aupr_out: float
    aupr_in: float
    n_pos: int
    n_neg: int


def evaluate_task(scores, labels, method, task):
    """Bundle AUROC / AUPR-Out / AUPR-In. Higher scores must mean out/error (label 1)."""
    scores, lab, n_pos, n_neg = _check(scores, labels)
    lab = lab.astype(int)
    return EvalReport(task, method, auroc(scores, lab), aupr(scores, lab, "out"),
                      aupr(scores, lab, "in"), n_pos, n_neg)


def write_report_csv(path, reports):
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def format_table(reports):
    """Aligned text table of reports (AUPR computed as average precision)."""
    head = ["task", "method", "AUROC", "AUPR-Out", "AUPR-In", "n_pos", "n_neg"]
    body = [[r.task, r.method, f"{r.auroc:.4f}", f"{r.aupr_out:.4f}", f"{r.aupr_in:.4f}",
             str(r.n_pos), str(r.n_neg)] for r in reports]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [head] + body]
    lines.insert(1, "-" * len(lines[0]))
    lines.append("(AUPR = average precision, one step per distinct score)")
    return "\n".join(lines)
