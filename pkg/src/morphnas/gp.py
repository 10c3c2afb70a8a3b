"""Gaussian-process regression over precomputed kernel matrices.

Costs are standardized before fitting so the acquisition trade-off has a
scale-free meaning; predictions are de-standardized back to cost units.
The kernel carries no learnable hyperparameters, so fitting is a single
Cholesky factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["GpModel", "GpFitError", "fit", "predict", "DEFAULT_NOISE"]

# residual observation noise in standardized units
DEFAULT_NOISE = 1e-4

_JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


class GpFitError(RuntimeError):
    """Kernel matrix could not be factorized even with maximum jitter."""


@dataclass
class GpModel:
    chol: np.ndarray
    alpha: np.ndarray
    y_mean: float
    y_std: float
    noise: float
    train_embed: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.alpha)


def fit(
    K: np.ndarray,
    y: np.ndarray,
    noise: float = DEFAULT_NOISE,
    train_embed: np.ndarray | None = None,
) -> GpModel:
    """Fit on a kernel matrix and observed costs."""
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 1:
        raise ValueError("need at least one observation")
    if K.shape != (n, n):
        raise ValueError(f"kernel matrix {K.shape} does not match {n} observations")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std <= 0.0:
        y_std = 1.0
    z = (y - y_mean) / y_std
    base = K + noise * np.eye(n)
    chol = None
    for jitter in _JITTERS:
        try:
            chol = np.linalg.cholesky(base + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        raise GpFitError(f"kernel matrix not positive definite at jitter {_JITTERS[-1]}")
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, z))
    return GpModel(chol=chol, alpha=alpha, y_mean=y_mean, y_std=y_std, noise=noise, train_embed=train_embed)


def predict(model: GpModel, k_star: np.ndarray, k_ss: float = 1.0) -> tuple[float, float]:
    """Posterior mean and standard deviation at one candidate, in cost units."""
    k_star = np.asarray(k_star, dtype=float)
    if k_star.shape != (model.n,):
        raise ValueError(f"cross-kernel vector has shape {k_star.shape}, expected ({model.n},)")
    mu_z = float(k_star @ model.alpha)
    v = np.linalg.solve(model.chol, k_star)
    var_z = k_ss - float(v @ v)
    sigma_z = math.sqrt(var_z) if var_z > 0.0 else 0.0
    return model.y_mean + model.y_std * mu_z, model.y_std * sigma_z
