"""Grouped knowledge preservation: per-group empirical Fisher and the
size-normalized EWC-style penalty anchoring the encoder to other groups' optima."""
from __future__ import annotations

import numpy as np

from .grouping import GroupPartition

DEFAULT_LAMBDA = 100.0


def fisher_from_grads(per_sample_grads) -> np.ndarray:
    G = np.atleast_2d(np.asarray(per_sample_grads, dtype=np.float64))
    if len(G) == 0:
        raise ValueError("cannot estimate Fisher from an empty group")
    return np.mean(G**2, axis=0)


def estimate_fisher(model, theta_ref, X, y) -> np.ndarray:
    """Empirical Fisher diagonal: mean squared per-sample gradient at ``theta_ref``.

    ``model`` needs a ``per_sample_grads(theta, X, y)`` method returning (N, d).
    """
    if len(y) == 0:
        raise ValueError("cannot estimate Fisher from an empty group")
    return fisher_from_grads(model.per_sample_grads(theta_ref, X, y))


def reference_point(theta, optimum) -> np.ndarray:
    """Current parameters with the encoder segment replaced by a group optimum."""
    ref = np.array(theta, dtype=np.float64)
    ref[: len(optimum)] = optimum
    return ref


def estimate_group_fishers(model, theta, partition: GroupPartition, X, y) -> np.ndarray:
    fishers = []
    for g in range(partition.G):
        mask = np.isin(y, partition.members(g))
        fishers.append(estimate_fisher(model, reference_point(theta, partition.optima[g]),
                                       X[mask], y[mask]))
    partition.fisher = np.array(fishers)
    return partition.fisher


def gkp_penalty(theta, partition: GroupPartition, active_group: int, lam: float = DEFAULT_LAMBDA,
                size_mode: str = "samples"):
    """Penalty value and gradient w.r.t. the full parameter vector.

    Only encoder coordinates (the length of each group optimum) are anchored;
    classifier entries of the gradient are zero.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    others = [j for j in range(partition.G) if j != active_group]
    if lam == 0 or not others:
        return 0.0, grad
    if partition.fisher is None:
        raise ValueError("Fisher diagonals have not been estimated")
    n_enc = partition.optima.shape[1]
    sizes = partition.sizes(size_mode)
    enc = theta[:n_enc]
    value = 0.0
    for j in others:
        diff = enc - partition.optima[j]
        weighted = partition.fisher[j][:n_enc] * diff / sizes[j]
        value += float(weighted @ diff)
        grad[:n_enc] += weighted
    return 0.5 * lam * value, lam * grad
