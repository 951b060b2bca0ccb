"""k-NN classification over normalized embeddings.

Neighbours are ranked by Euclidean distance on the unit sphere, which orders
candidates exactly like cosine distance. Ties in the vote go to the class with
the smaller summed neighbour distance, then to the lower class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spheremetric.errors import ContractError
from spheremetric.geometry import (
    EmbeddingBatch,
    pairwise_cosine_distance,
    pairwise_euclidean_distance,
)

METRICS = {"euclidean": pairwise_euclidean_distance, "cosine": pairwise_cosine_distance}


@dataclass
class KnnIndex:
    reference: EmbeddingBatch
    n_classes: int | None = None

    def __post_init__(self):
        if len(self.reference) == 0:
            raise ContractError("k-NN index is empty")
        if not self.reference.normalized:
            raise ContractError("k-NN index needs normalized reference embeddings")
        if len(set(self.reference.labels.tolist())) < 2:
            raise ContractError("k-NN index needs at least two classes")
        if self.n_classes is None:
            self.n_classes = int(self.reference.labels.max()) + 1

    def __len__(self):
        return len(self.reference)


def _check_queries(index, queries):
    if not queries.normalized:
        raise ContractError("queries must be normalized")
    if queries.vectors.shape[1] != index.reference.vectors.shape[1]:
        raise ContractError("query and reference dimensions differ")


def _neighbours(index, queries, k_max, metric, exclude_self):
    if metric not in METRICS:
        raise ContractError(f"unknown metric {metric!r}")
    cos = pairwise_cosine_distance(queries.vectors, index.reference.vectors)
    # ranking follows the requested metric; the summed-distance tie-break is always Euclidean
    euclid = np.sqrt(np.maximum(2.0 * cos, 0.0))
    dist = cos if metric == "cosine" else euclid
    available = len(index) - (1 if exclude_self else 0)
    if not 1 <= k_max <= available:
        raise ContractError(f"k={k_max} must be between 1 and the {available} usable references")
    if exclude_self:
        if len(queries) != len(index):
            raise ContractError("exclude_self needs queries that are the reference batch itself")
        np.fill_diagonal(dist, np.inf)
        np.fill_diagonal(euclid, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k_max]
    return np.take_along_axis(euclid, order, axis=1), index.reference.labels[order]


def _votes(nbr_dist, nbr_labels, n_classes):
    """Predictions for every k = 1..K at once; returns a (Q, K) array."""
    onehot = np.eye(n_classes, dtype=int)[nbr_labels]           # Q x K x n
    counts = np.cumsum(onehot, axis=1)
    dsum = np.cumsum(onehot * nbr_dist[:, :, None], axis=1)
    best = counts == counts.max(axis=2, keepdims=True)
    return np.argmin(np.where(best, dsum, np.inf), axis=2)


def knn_classify(index: KnnIndex, queries: EmbeddingBatch, k: int = 1,
                 metric: str = "euclidean", exclude_self: bool = False) -> np.ndarray:
    _check_queries(index, queries)
    if len(queries) == 0:
        return np.zeros(0, dtype=int)
    d, lab = _neighbours(index, queries, k, metric, exclude_self)
    return _votes(d, lab, index.n_classes)[:, k - 1]


def knn_sweep(index: KnnIndex, validation: EmbeddingBatch, k_max: int = 30,
              metric: str = "euclidean", exclude_self: bool = False):
    """Accuracy for each k in 1..k_max; returns (smallest best k, accuracies)."""
    _check_queries(index, validation)
    if len(validation) == 0:
        raise ContractError("validation batch is empty")
    d, lab = _neighbours(index, validation, k_max, metric, exclude_self)
    preds = _votes(d, lab, index.n_classes)
    acc = (preds == validation.labels[:, None]).mean(axis=0)
    best_k = int(np.argmax(acc)) + 1
    return best_k, [float(a) for a in acc]


def class_scores(index: KnnIndex, queries: EmbeddingBatch) -> np.ndarray:
    """Per-class score = 1 - cosine distance to the nearest reference of that class."""
    _check_queries(index, queries)
    dist = pairwise_cosine_distance(queries.vectors, index.reference.vectors)
    out = np.empty((len(queries), index.n_classes))
    for c in range(index.n_classes):
        members = index.reference.labels == c
        if not members.any():
            raise ContractError(f"class {c} has no reference embeddings")
        out[:, c] = 1.0 - dist[:, members].min(axis=1)
    return out
