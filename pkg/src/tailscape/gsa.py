"""Grouped sharpness-aware perturbations.

A group's gradient is stripped of its component along the (head-dominated)
global gradient; the residual sets the ascent direction, and the ascent
radius shrinks with the group's sample count as ``(n - 1) ** -1/4``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GLOBAL_EPS = 1e-12
DEFAULT_Z = 1e-2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def projection(group_grad, global_grad) -> np.ndarray:
    """Component of ``group_grad`` along ``global_grad`` (zero if the latter vanishes)."""
    a, b = _check_pair(group_grad, global_grad)
    bb = float(b @ b)
    if np.sqrt(bb) <= GLOBAL_EPS:
        return np.zeros_like(a)
    return (float(a @ b) / bb) * b


def decompose(group_grad, global_grad) -> np.ndarray:
    """Residual of ``group_grad`` after removing its projection on ``global_grad``."""
    a, _ = _check_pair(group_grad, global_grad)
    return a - projection(group_grad, global_grad)


def characteristic_radius(theta_norm, grad_norm, d, n, dim_exponent=0.25) -> float:
    """``(|theta| / 2|g|)^1/2 * d^-e * (n-1)^-1/4`` with ``e`` = 1/4 by default."""
    if n < 2:
        raise ValueError(f"sample count must be >= 2, got {n}")
    if grad_norm <= 0:
        return 0.0
    return float(np.sqrt(theta_norm / (2.0 * grad_norm)) * d ** -dim_exponent * (n - 1) ** -0.25)


def group_radius(theta, decomposed_grad, group_size, Z=DEFAULT_Z, dim_exponent=0.25) -> float:
    """Scaled group radius; 0 when the decomposed gradient vanishes."""
    theta = np.asarray(theta, dtype=np.float64)
    rho = characteristic_radius(np.linalg.norm(theta), np.linalg.norm(decomposed_grad),
                                len(theta), group_size, dim_exponent)
    return Z * rho


def perturbation(direction, rho, d) -> np.ndarray:
    """``sqrt(d) * rho * direction / |direction|``; zero offset when ``rho`` is 0."""
    if rho < 0:
        raise ValueError("radius must be non-negative")
    direction = np.asarray(direction, dtype=np.float64)
    if rho == 0:
        return np.zeros_like(direction)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ValueError("cannot perturb along a zero-norm direction")
    return (np.sqrt(d) * rho / norm) * direction


def plain_sam_radius(theta, global_grad, N) -> float:
    return characteristic_radius(np.linalg.norm(theta), np.linalg.norm(global_grad),
                                 len(theta), N)


def plain_sam_perturbation(theta, global_grad, N, Z=DEFAULT_Z) -> np.ndarray:
    """Standard SAM ascent step along the full (global) gradient."""
    g = np.asarray(global_grad, dtype=np.float64)
    if np.linalg.norm(g) <= GLOBAL_EPS:
        raise ValueError("global gradient is zero")
    return perturbation(g, Z * plain_sam_radius(theta, g, N), len(g))


def regularizer(theta, rho_star, n):
    """``|theta| / (2 sqrt(n-1) rho*)`` and its gradient (``rho*`` held fixed)."""
    theta = np.asarray(theta, dtype=np.float64)
    norm = np.linalg.norm(theta)
    if rho_star <= 0 or norm == 0:
        return 0.0, np.zeros_like(theta)
    coef = 1.0 / (2.0 * np.sqrt(n - 1) * rho_star)
    return coef * norm, (coef / norm) * theta


@dataclass
class GroupStep:
    value: float
    grad: np.ndarray
    data_loss: float
    rho: float
    rho_star: float
    resid_norm: float
    inner: float
    reg_value: float
    degenerate: bool


def gsa_loss_and_grad(loss_grad, theta, global_grad, group_size, Z=DEFAULT_Z,
                      use_regularizer=True, direction="residual", dim_exponent=0.25,
                      max_rho=None) -> GroupStep:
    """One group's sharpness-aware objective with first-order SAM gradient.

    ``loss_grad(theta) -> (loss, grad)`` evaluates the group's data loss.
    ``direction`` is ``"residual"`` (GSA) or ``"projection"`` (the GSA-proj
    control, which ascends along the global-aligned component instead).
    ``max_rho`` caps the scaled radius; the radius grows without bound as the
    direction's norm vanishes.
    """
    theta = np.asarray(theta, dtype=np.float64)
    loss0, g = loss_grad(theta)
    if direction == "residual":
        u = decompose(g, global_grad)
    elif direction == "projection":
        u = projection(g, global_grad)
    else:
        raise ValueError(f"unknown perturbation direction {direction!r}")
    d = len(theta)
    rho_star = characteristic_radius(np.linalg.norm(theta), np.linalg.norm(u), d, group_size,
                                     dim_exponent)
    rho = Z * rho_star
    if max_rho is not None:
        rho = min(rho, max_rho)
    if rho > 0:
        loss, grad = loss_grad(theta + perturbation(u, rho, d))
    else:
        loss, grad = loss0, g
    degenerate = rho_star <= 0
    reg_value = 0.0
    if use_regularizer and not degenerate:
        reg_value, reg_grad = regularizer(theta, rho_star, group_size)
        grad = grad + reg_grad
    return GroupStep(loss + reg_value, grad, loss, rho, rho_star, float(np.linalg.norm(u)),
                     float(u @ np.asarray(global_grad)), reg_value, degenerate)
