"""Memory bank of best per-class encoder snapshots and Normalized-Cut grouping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components


@dataclass
class MemoryBank:
    num_classes: int
    enc_dim: int
    best_q: np.ndarray = field(init=False)
    snapshots: np.ndarray = field(init=False)
    epoch_found: np.ndarray = field(init=False)
    populated: np.ndarray = field(init=False)

    def __post_init__(self):
        self.best_q = np.full(self.num_classes, -np.inf)
        self.snapshots = np.zeros((self.num_classes, self.enc_dim))
        self.epoch_found = np.full(self.num_classes, -1, dtype=np.int64)
        self.populated = np.zeros(self.num_classes, dtype=bool)

    @property
    def full(self) -> bool:
        return bool(self.populated.all())


def update_bank(bank: MemoryBank, theta_enc, q_values, epoch: int) -> MemoryBank:
    """Replace a class's snapshot only when its quality strictly improves."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.shape != (bank.num_classes,) or not np.all(np.isfinite(q)):
        raise ValueError("need one finite quality value per class")
    take = ~bank.populated | (q > bank.best_q)
    bank.best_q[take] = q[take]
    bank.snapshots[take] = theta_enc
    bank.epoch_found[take] = epoch
    bank.populated |= take
    return bank


def build_affinity(bank: MemoryBank, project_dim: int | None = None, seed: int = 0) -> np.ndarray:
    """Gaussian kernel on snapshot distances with the median-distance bandwidth."""
    if not bank.full:
        raise ValueError(f"memory bank has unpopulated classes: "
                         f"{np.flatnonzero(~bank.populated).tolist()}")
    S = bank.snapshots
    if project_dim is not None and S.shape[1] > project_dim:
        P = np.random.default_rng(seed).standard_normal((S.shape[1], project_dim))
        S = S @ P / np.sqrt(project_dim)
    return gaussian_affinity(S)


def gaussian_affinity(points) -> np.ndarray:
    X = np.asarray(points, dtype=np.float64)
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(X), 1)
    sigma = np.median(np.sqrt(sq[iu])) if len(iu[0]) else 0.0
    if sigma <= 0:
        sigma = 1.0
    W = np.exp(-sq / (2 * sigma**2))
    np.fill_diagonal(W, 0.0)
    return W


def ncut_value(W, labels) -> float:
    """Normalized-cut cost: sum over groups of cut(A, rest) / vol(A)."""
    W = np.asarray(W)
    labels = np.asarray(labels)
    deg = W.sum(axis=1)
    total = 0.0
    for g in np.unique(labels):
        inside = labels == g
        vol = deg[inside].sum()
        cut = W[np.ix_(inside, ~inside)].sum()
        total += cut / vol if vol > 0 else 0.0
    return float(total)


def laplacian_spectrum(W):
    """Eigen-decomposition of I - D^-1/2 W D^-1/2, eigenvalues ascending."""
    deg = W.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    L = np.eye(len(W)) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    vals, vecs = np.linalg.eigh((L + L.T) / 2)
    return vals, vecs


def kmeans(X, k: int, seed: int = 0, restarts: int = 25, max_iter: int = 100):
    """Lloyd's k-means with k-means++ seeding; returns (labels, centers, inertia).

    The best inertia over ``restarts`` wins, ties going to the earliest restart.
    """
    X = np.asarray(X, dtype=np.float64)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers = _kmeanspp(X, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
            new = np.argmin(d2, axis=1)
            for j in range(k):
                if not np.any(new == j):
                    # reseed an empty cluster at the point farthest from its center
                    far = int(np.argmax(d2[np.arange(len(X)), new]))
                    new[far] = j
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        inertia = float(np.sum((X - centers[labels]) ** 2))
        if best is None or inertia < best[2]:
            best = (labels.copy(), centers, inertia)
    return best


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min(np.sum((X[:, None, :] - np.array(centers)[None]) ** 2, axis=-1), axis=1)
        if d2.sum() > 0:
            centers.append(X[rng.choice(len(X), p=d2 / d2.sum())])
        else:
            centers.append(X[rng.integers(len(X))])
    return np.array(centers)


def canonical_labels(labels) -> np.ndarray:
    """Renumber groups in order of first appearance."""
    mapping = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, g in enumerate(labels):
        out[i] = mapping.setdefault(int(g), len(mapping))
    return out


def ncut_partition(W, G: int, seed: int = 0, restarts: int = 25, max_iter: int = 100) -> np.ndarray:
    """Spectral NCut (Ng-Jordan-Weiss): normalized-Laplacian embedding + k-means."""
    W = np.asarray(W, dtype=np.float64)
    C = len(W)
    if not 1 <= G <= C:
        raise ValueError(f"group count G={G} must be in [1, {C}]")
    if G == 1:
        return np.zeros(C, dtype=np.int64)
    if G == C:
        return np.arange(C, dtype=np.int64)
    n_comp, comp = connected_components(W > 0, directed=False)
    if n_comp >= G or np.any(W.sum(axis=1) <= 0):
        return _component_labels(comp, G)
    _, vecs = laplacian_spectrum(W)
    U = vecs[:, :G]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = U / np.where(norms > 0, norms, 1.0)
    labels, centers, _ = kmeans(U, G, seed=seed, restarts=restarts, max_iter=max_iter)
    labels = _repair_empty(U, labels, centers, G)
    return canonical_labels(labels)


def _component_labels(comp, G):
    # largest components keep their own group; the rest merge into the last one
    ids, sizes = np.unique(comp, return_counts=True)
    order = ids[np.lexsort((ids, -sizes))]
    rank = {int(c): min(i, G - 1) for i, c in enumerate(order)}
    labels = np.array([rank[int(c)] for c in comp])
    if len(np.unique(labels)) < G:
        raise ValueError("affinity graph cannot be split into the requested number of groups")
    return canonical_labels(labels)


def _repair_empty(U, labels, centers, G):
    labels = labels.copy()
    for g in range(G):
        if np.any(labels == g):
            continue
        sizes = np.bincount(labels, minlength=G)
        movable = np.flatnonzero(sizes[labels] > 1)
        d = np.sum((U[movable] - centers[g]) ** 2, axis=1)
        labels[movable[int(np.argmin(d))]] = g
    return labels


@dataclass
class GroupPartition:
    assignment: np.ndarray
    optima: np.ndarray
    n_samples: np.ndarray
    n_classes: np.ndarray
    fisher: np.ndarray | None = None

    @property
    def G(self) -> int:
        return len(self.optima)

    def members(self, g) -> np.ndarray:
        return np.flatnonzero(self.assignment == g)

    def sizes(self, mode: str = "samples") -> np.ndarray:
        if mode == "samples":
            return self.n_samples
        if mode == "classes":
            return self.n_classes
        raise ValueError(f"unknown group size mode {mode!r}")


def group_optima(bank: MemoryBank, assignment, class_counts) -> GroupPartition:
    """Per-group optimum = unweighted mean of member-class snapshots."""
    assignment = np.asarray(assignment, dtype=np.int64)
    counts = np.asarray(class_counts)
    if not bank.full:
        raise ValueError("memory bank has unpopulated classes")
    if len(assignment) != bank.num_classes:
        raise ValueError("assignment must cover every class")
    G = int(assignment.max()) + 1
    optima, n_samples, n_classes = [], [], []
    for g in range(G):
        members = assignment == g
        if not members.any():
            raise ValueError(f"group {g} is empty")
        optima.append(bank.snapshots[members].mean(axis=0))
        n_samples.append(int(counts[members].sum()))
        n_classes.append(int(members.sum()))
    return GroupPartition(assignment, np.array(optima), np.array(n_samples), np.array(n_classes))
