"""Loss-geometry diagnostics: Hessian sharpness, 2-D landscapes, gradient
similarity, and the stochastic convergence-floor experiment.

The Hessian probes take a gradient callable ``grad_fn(theta) -> grad`` so they
apply equally to the network and to closed-form test problems.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gkp as gkp_mod
from . import gsa as gsa_mod
from .grouping import GroupPartition


def batch_grad_fn(net, X, y):
    return lambda th: net.loss_and_grad(th, X, y)[1]


def batch_loss_fn(net, X, y):
    return lambda th: net.loss_and_grad(th, X, y)[0]


def hvp(grad_fn, theta, v):
    """Hessian-vector product by central differences of the gradient."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vnorm = np.linalg.norm(v)
    if vnorm == 0:
        raise ValueError("direction must be non-zero")
    h = 1e-4 * (1.0 + np.linalg.norm(theta))
    u = v / vnorm
    return (grad_fn(theta + h * u) - grad_fn(theta - h * u)) / (2 * h) * vnorm


def lambda_max(grad_fn, theta, iters: int = 100, seed: int = 0, tol: float = 1e-6) -> float:
    """Dominant-magnitude Hessian eigenvalue by power iteration."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(len(theta))
    v /= np.linalg.norm(v)
    lam = None
    for _ in range(iters):
        Hv = hvp(grad_fn, theta, v)
        new = float(v @ Hv)
        norm = np.linalg.norm(Hv)
        if norm == 0:
            return 0.0
        v = Hv / norm
        if lam is not None and abs(new - lam) <= tol * max(abs(new), 1e-30):
            return new
        lam = new
    return lam


def hessian_trace(grad_fn, theta, probes_n: int = 100, seed: int = 0) -> float:
    """Hutchinson estimate with Rademacher probes."""
    if probes_n < 1:
        raise ValueError("probes_n must be >= 1")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(probes_n):
        v = rng.choice([-1.0, 1.0], size=len(theta))
        total += float(v @ hvp(grad_fn, theta, v))
    return total / probes_n


def filter_normalize(direction, theta, blocks):
    """Rescale each parameter block of ``direction`` to the norm of that block of ``theta``."""
    out = np.array(direction, dtype=np.float64)
    for a, b in blocks:
        dn = np.linalg.norm(out[a:b])
        out[a:b] *= np.linalg.norm(theta[a:b]) / dn if dn > 0 else 0.0
    return out


def landscape_grid(loss_fn, theta, resolution: int = 21, span: float = 1.0, seed: int = 0,
                   blocks=None, directions=None):
    """Loss on ``theta + a*d1 + b*d2`` over an odd ``resolution``-square grid.

    Returns ``(alphas, grid)`` with ``grid[i, j]`` at ``(alphas[i], alphas[j])``.
    """
    if resolution < 3:
        raise ValueError("resolution must be >= 3")
    if resolution % 2 == 0:
        raise ValueError("resolution must be odd so the grid has a centre cell")
    theta = np.asarray(theta, dtype=np.float64)
    if directions is None:
        rng = np.random.default_rng(seed)
        blocks = blocks or [(0, len(theta))]
        directions = [filter_normalize(rng.standard_normal(len(theta)), theta, blocks)
                      for _ in range(2)]
    d1, d2 = directions
    alphas = np.linspace(-span, span, resolution)
    alphas[resolution // 2] = 0.0
    grid = np.empty((resolution, resolution))
    for i, a in enumerate(alphas):
        for j, b in enumerate(alphas):
            grid[i, j] = loss_fn(theta + a * d1 + b * d2)
    return alphas, grid


def cosine(a, b, eps=1e-12) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        return 0.0
    return float(a @ b / (na * nb))


def similarity_from_class_grads(class_grads: dict, counts: dict, batch_grad=None) -> dict:
    """Cosine of each class gradient with the count-weighted batch gradient."""
    total = sum(counts.values())
    recon = sum(counts[c] / total * g for c, g in class_grads.items())
    if batch_grad is not None:
        scale = max(np.linalg.norm(batch_grad), 1e-300)
        if np.linalg.norm(recon - batch_grad) > 1e-9 * scale + 1e-15:
            raise AssertionError("class gradients do not reconstruct the batch gradient")
    else:
        batch_grad = recon
    return {c: cosine(g, batch_grad) for c, g in class_grads.items()}


def gradient_similarity(net, theta, X, y) -> dict:
    y = np.asarray(y)
    class_grads = net.per_class_grads(theta, X, y)
    counts = {c: int(np.sum(y == c)) for c in class_grads}
    _, batch_grad = net.loss_and_grad(theta, X, y)
    return similarity_from_class_grads(class_grads, counts, batch_grad)


# -- convergence floor ---------------------------------------------------------

@dataclass
class QuadraticProblem:
    """Grouped strongly convex quadratic with an EWC-style anchor term.

    Group ``g`` contributes ``0.5 (x - c_g)^T A_g (x - c_g)`` with diagonal
    ``A_g``; the anchors reuse the grouped penalty with per-group Fisher
    diagonals ``A_g`` at optima ``c_g``.
    """
    dim: int = 10
    groups: int = 4
    noise: float = 1.0
    lam: float = 1.0
    alpha: float = 0.8
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 7])
        self.A = rng.uniform(0.5, 2.0, (self.groups, self.dim))
        self.centers = rng.standard_normal((self.groups, self.dim))
        self.sizes = np.full(self.groups, 2)
        if np.any(self.A <= 0):
            raise ValueError("quadratic must be positive definite")
        self.partition = GroupPartition(np.arange(self.groups), self.centers,
                                        self.sizes, np.ones(self.groups, dtype=int), self.A)
        # total curvature and linear term of the combined objective
        a, lam, s = self.alpha, self.lam, self.sizes[:, None]
        H = np.zeros(self.dim)
        r = np.zeros(self.dim)
        for g in range(self.groups):
            w_gkp = (1 - a) * lam * (self.groups - 1) / s[g]
            H += a * self.A[g] + w_gkp * self.A[g]
            r += (a * self.A[g] + w_gkp * self.A[g]) * self.centers[g]
        self.H, self.xstar = H, r / H
        self.fstar = self.objective(self.xstar)

    def group_grad(self, x, g):
        return self.A[g] * (x - self.centers[g])

    def objective(self, x) -> float:
        a = self.alpha
        total = 0.0
        for g in range(self.groups):
            diff = x - self.centers[g]
            total += a * 0.5 * float(diff @ (self.A[g] * diff))
            total += (1 - a) * gkp_mod.gkp_penalty(x, self.partition, g, self.lam)[0]
        return total


def convergence_floor(problem: QuadraticProblem, lr: float, rho: float, steps: int = 4000,
                      seeds=range(10), x0=None) -> float:
    """Mean over seeds of the final optimality gap of noisy grouped SAM + GKP descent.

    Each group ascends by ``rho`` along its gradient with the global component
    removed (falling back to the raw group gradient when that residual
    vanishes), and every gradient evaluation carries Gaussian noise of scale
    ``problem.noise``.
    """
    if np.any(problem.A <= 0):
        raise ValueError("quadratic must be positive definite")
    gaps = []
    a = problem.alpha
    for seed in seeds:
        rng = np.random.default_rng([seed, 11])
        x = np.zeros(problem.dim) if x0 is None else np.array(x0, dtype=np.float64)
        for _ in range(steps):
            noisy = [problem.group_grad(x, g) + problem.noise * rng.standard_normal(problem.dim)
                     for g in range(problem.groups)]
            glob = sum(noisy) / problem.groups
            total = np.zeros(problem.dim)
            for g in range(problem.groups):
                u = gsa_mod.decompose(noisy[g], glob)
                if np.linalg.norm(u) == 0:
                    u = noisy[g]
                eps = rho * u / np.linalg.norm(u) if rho > 0 and np.linalg.norm(u) > 0 else 0.0
                pert = problem.group_grad(x + eps, g) + problem.noise * rng.standard_normal(problem.dim)
                total += a * pert
                total += (1 - a) * gkp_mod.gkp_penalty(x, problem.partition, g, problem.lam)[1]
            x = x - lr * total
        gaps.append(problem.objective(x) - problem.fstar)
    return float(np.mean(gaps))
