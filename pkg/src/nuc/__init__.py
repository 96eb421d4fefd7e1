"""Predict when a frozen classifier is wrong from the k-nearest-neighbor
structure of its representation space."""

from .baselines import (MahalanobisScorer, TemperatureScaler, kde_baseline_scores,
                        softmax_score)
from .knn_index import DistanceKernel, KNNIndex, NeighborQuery, build_index
from .metrics import EvalReport, auroc, aupr, evaluate_task
from .neigh_stats import NeighborhoodStats, stats_sweep
from .nuc_model import NUCClassifier, NucNetwork, TrainConfig, score, train
from .repr_store import ReprSet, correctness_labels, load_dataset, load_repr_set, save_dataset
from .synth import SynthConfig, generate, split

__version__ = "0.1.0"

__all__ = [
    "DistanceKernel", "EvalReport", "KNNIndex", "MahalanobisScorer", "NUCClassifier",
    "NeighborQuery", "NeighborhoodStats", "NucNetwork", "ReprSet", "SynthConfig",
    "TemperatureScaler", "TrainConfig", "auroc", "aupr", "build_index", "correctness_labels",
    "evaluate_task", "generate", "kde_baseline_scores", "load_dataset", "load_repr_set",
    "save_dataset", "score", "softmax_score", "split", "stats_sweep", "train",
]
