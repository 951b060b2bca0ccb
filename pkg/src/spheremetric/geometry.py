"""Hypersphere utilities: normalization, cosine/Euclidean distances, angles, cluster separation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from spheremetric.errors import ContractError
from spheremetric.numerics import DTYPE

UNIT_TOL = 1e-6


@dataclass
class EmbeddingBatch:
    vectors: np.ndarray
    labels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=DTYPE)
        if self.vectors.ndim != 2:
            raise ContractError(f"embedding vectors must be N x d, got shape {self.vectors.shape}")
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.labels) != len(self.vectors):
            raise ContractError(f"{len(self.vectors)} vectors but {len(self.labels)} labels")
        if self.normalized:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ContractError("batch flagged normalized has rows off the unit sphere")

    def __len__(self):
        return len(self.labels)


def l2_normalize(batch: EmbeddingBatch) -> EmbeddingBatch:
    norms = np.linalg.norm(batch.vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ContractError(f"cannot normalize zero vector at row {int(zero[0])}")
    return EmbeddingBatch(batch.vectors / norms[:, None], batch.labels.copy(), normalized=True)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    return l2_normalize(EmbeddingBatch(x, np.zeros(len(x), dtype=int))).vectors


def _require_unit(*vectors):
    for v in vectors:
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise ContractError("expected a unit-norm vector")


def cosine_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    _require_unit(a, b)
    return float(1.0 - a @ b)


def euclidean_distance(a, b) -> float:
    """sqrt(2 * cosine distance): equal to |a - b| on the unit sphere."""
    return math.sqrt(max(2.0 * cosine_distance(a, b), 0.0))


def angle_between(a, b) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    _require_unit(a, b)
    return float(np.arccos(np.clip(a @ b, -1.0, 1.0)))


def pairwise_cosine_distance(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    return 1.0 - queries @ refs.T


def pairwise_euclidean_distance(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(2.0 * pairwise_cosine_distance(queries, refs), 0.0))


@dataclass
class SeparationStats:
    classes: list[int]
    centroids: np.ndarray
    mean_intra_angle: float
    min_inter_angle: float
    intra_angle_per_class: dict[int, float] = field(default_factory=dict)

    def to_dict(self):
        return {
            "mean_intra_angle": self.mean_intra_angle,
            "min_inter_angle": self.min_inter_angle,
            "intra_angle_per_class": {str(k): v for k, v in self.intra_angle_per_class.items()},
        }


def separation_stats(batch: EmbeddingBatch) -> SeparationStats:
    """Centroid directions, mean sample-to-own-centroid angle, smallest centroid-to-centroid angle."""
    if not batch.normalized:
        raise ContractError("separation_stats needs a normalized batch")
    classes = sorted(set(batch.labels.tolist()))
    if len(classes) < 2:
        raise ContractError("separation_stats needs at least two classes")
    centroids = []
    for c in classes:
        mean = batch.vectors[batch.labels == c].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise ContractError(f"class {c} has a zero mean vector; centroid direction undefined")
        centroids.append(mean / norm)
    centroids = np.array(centroids)
    cidx = np.searchsorted(classes, batch.labels)
    own = np.clip((batch.vectors * centroids[cidx]).sum(axis=1), -1.0, 1.0)
    angles = np.arccos(own)
    per_class = {c: float(angles[cidx == i].mean()) for i, c in enumerate(classes)}
    between = np.arccos(np.clip(centroids @ centroids.T, -1.0, 1.0))
    iu = np.triu_indices(len(classes), 1)
    return SeparationStats(classes, centroids, float(angles.mean()), float(between[iu].min()), per_class)
