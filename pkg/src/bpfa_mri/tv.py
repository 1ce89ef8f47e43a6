"""Isotropic total variation: the shrinkage step and scaled dual update of ADMM."""

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, psi_apply


@dataclass
class TVState:
    """Split TV coefficients ``beta`` and scaled dual ``u`` (both ``n x n x 2``).

    The unscaled multiplier is ``rho * u`` and is never stored.
    """

    beta: np.ndarray
    u: np.ndarray
    rho: float = 1000.0
    lambda_g: float = 10.0

    def __post_init__(self):
        if self.beta.shape != self.u.shape or self.beta.ndim != 3 or self.beta.shape[2] != 2:
            raise ConfigError(f"beta {self.beta.shape} and u {self.u.shape} must both be (n, n, 2)")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.lambda_g < 0:
            raise ConfigError(f"lambda_g must be non-negative, got {self.lambda_g}")

    @classmethod
    def from_image(cls, x: np.ndarray, rho: float = 1000.0, lambda_g: float = 10.0) -> "TVState":
        beta = psi_apply(x)
        return cls(beta=beta, u=np.zeros_like(beta), rho=rho, lambda_g=lambda_g)


def shrink(w: np.ndarray, threshold: float) -> np.ndarray:
    """Group soft-thresholding of the last axis: ``max(|w| - t, 0) w / |w|``.

    Exactly zero where ``|w| = 0``.
    """
    norm = np.sqrt(np.sum(np.abs(w) ** 2, axis=-1, keepdims=True))
    scale = np.maximum(norm - threshold, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(norm > 0, scale / np.where(norm > 0, norm, 1.0), 0.0)
    return w * factor


def shrink_update(x: np.ndarray, st: TVState) -> np.ndarray:
    """Per-pixel minimiser of ``lambda_g |b| + rho/2 |psi_i x + u_i - b|^2``."""
    w = psi_apply(x) + st.u
    if st.lambda_g == 0:
        return w
    return shrink(w, st.lambda_g / st.rho)


def dual_update(x: np.ndarray, st: TVState) -> np.ndarray:
    """``u + Psi x - beta`` with ``beta`` already updated this iteration."""
    return st.u + (psi_apply(x) - st.beta)


def tv_value(x: np.ndarray) -> float:
    """Isotropic TV, the sum over pixels of the 2-norm of the difference pair."""
    beta = psi_apply(x)
    return float(np.sum(np.sqrt(np.sum(np.abs(beta) ** 2, axis=-1))))


def primal_residual(x: np.ndarray, st: TVState) -> float:
    """``||Psi x - beta||_2``."""
    return float(np.linalg.norm(psi_apply(x) - st.beta))
