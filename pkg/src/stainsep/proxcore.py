"""Proximal operators and step sizes for the unrolled stain solver.

The density prox solves, for a column d and thresholds (t1, t2),

    argmin_{v >= 0}  0.5 ||v - d||^2 + t1 ||v||_1 + t2 ||v||_2

by entrywise shrink-and-project followed by block soft-thresholding of the
norm; the sequential composition is the exact joint prox.  The spectrum prox
is the same with t1 = 0.  Everything here is stateless and total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Guard for the 1/||M||_F^2 step size when a factor matrix is all-zero.
EPS_TAU = 1e-8


@dataclass(frozen=True)
class ProxThresholds:
    """Composite shrinkage thresholds for one density column."""

    theta_l1: float
    theta_l2: float

    def __post_init__(self):
        if self.theta_l1 < 0 or self.theta_l2 < 0:
            raise ValueError("thresholds must be nonnegative")


def _shrink_norms(U: np.ndarray, theta_l2: np.ndarray) -> np.ndarray:
    """Scale columns of U by (1 - min(||u||, theta) / ||u||), zero when ||u|| = 0."""
    norms = np.sqrt(np.einsum("ij,ij->j", U, U))
    alive = norms > 0.0
    scale = np.zeros_like(norms)
    np.divide(np.minimum(norms, theta_l2), norms, out=scale, where=alive)
    scale = np.where(alive, 1.0 - scale, 0.0)
    return U * scale[None, :]


def prox_density_matrix(D: np.ndarray, theta_l1: np.ndarray, theta_l2: np.ndarray) -> np.ndarray:
    """Column-wise density prox of a (p, r) matrix with per-column thresholds."""
    U = np.maximum(D - np.asarray(theta_l1)[None, :], 0.0)
    return _shrink_norms(U, np.asarray(theta_l2))


def prox_spectrum_matrix(S: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Column-wise spectrum prox of a (c, r) matrix with per-column thresholds."""
    return _shrink_norms(np.maximum(S, 0.0), np.asarray(theta))


def prox_density_column(d: np.ndarray, thresholds: ProxThresholds) -> np.ndarray:
    """Density prox of a single column; zero whenever the shrunk norm is killed."""
    d = np.asarray(d, dtype=np.float64)
    return prox_density_matrix(
        d[:, None], np.array([thresholds.theta_l1]), np.array([thresholds.theta_l2])
    )[:, 0]


def prox_spectrum_column(s: np.ndarray, theta: float) -> np.ndarray:
    """Spectrum prox of a single column (nonneg projection + norm shrinkage)."""
    if theta < 0:
        raise ValueError("threshold must be nonnegative")
    s = np.asarray(s, dtype=np.float64)
    return prox_spectrum_matrix(s[:, None], np.array([theta]))[:, 0]


def step_from_norm_sq(norm_sq: float, eps_tau: float = EPS_TAU) -> float:
    """1 / max(norm_sq, eps_tau): finite positive for any input."""
    return 1.0 / max(norm_sq, eps_tau)


def safe_step_size(M: np.ndarray, eps_tau: float = EPS_TAU) -> float:
    """Gradient step size 1 / ||M||_F^2, guarded against all-zero M."""
    M = np.asarray(M, dtype=np.float64)
    return step_from_norm_sq(float(np.sum(M * M)), eps_tau)
