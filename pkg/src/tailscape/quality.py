"""Per-class feature quality: centroid separation minus beta * log(variance)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-12
DEFAULT_BETA = 0.5


@dataclass
class ClassFeatureStats:
    centroid: np.ndarray
    variance: float
    count: int


def class_stats(features) -> ClassFeatureStats:
    A = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(A) == 0:
        raise ValueError("class has no features")
    mu = A.mean(axis=0)
    var = float(np.mean(np.sum((A - mu) ** 2, axis=1)))
    return ClassFeatureStats(mu, var, len(A))


def inter_class_separation(centroids: dict, c) -> float:
    """Distance from class ``c``'s centroid to the nearest other centroid."""
    if len(centroids) < 2:
        raise ValueError("need at least two class centroids")
    mu = np.asarray(centroids[c])
    return float(min(np.linalg.norm(mu - np.asarray(v)) for k, v in centroids.items() if k != c))


def feature_quality(features, centroids: dict, c, beta: float = DEFAULT_BETA) -> float:
    stats = class_stats(features)
    dis = inter_class_separation(centroids, c)
    return dis - beta * np.log(max(stats.variance, VAR_FLOOR))


def quality_scores(features, labels, num_classes: int, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Q for every class; all classes must appear in ``labels``."""
    labels = np.asarray(labels)
    groups = {c: features[labels == c] for c in range(num_classes)}
    missing = [c for c, A in groups.items() if len(A) == 0]
    if missing:
        raise ValueError(f"classes without evaluation samples: {missing}")
    stats = {c: class_stats(A) for c, A in groups.items()}
    centroids = {c: s.centroid for c, s in stats.items()}
    return np.array([
        inter_class_separation(centroids, c) - beta * np.log(max(stats[c].variance, VAR_FLOOR))
        for c in range(num_classes)
    ])
