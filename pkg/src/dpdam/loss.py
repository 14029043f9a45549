"""Density power divergence loss for the Gaussian working model.

For ``nu > 0`` the per-observation loss is

    V_i = 1 / ((2 pi)^{nu/2} sigma^nu sqrt(1 + nu)) - (1 + nu) / nu * f_i^nu

with ``f_i`` the N(0, sigma^2) density at the residual. The data-only
constant of the divergence is dropped, so objective values are comparable
only at a fixed ``nu``. For ``nu = 0`` the loss is ``-log f_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .penalty import PenaltySpec, penalty_value

LOG_2PI = np.log(2.0 * np.pi)
WEIGHT_FLOOR = 1e-300


@dataclass(frozen=True)
class DpdParams:
    nu: float
    sigma2: float

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu >= 0.0):
            raise ValueError("nu must be finite and >= 0")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0.0):
            raise ValueError("sigma2 must be finite and > 0")


@dataclass(frozen=True)
class Coefficients:
    """Intercept ``mu`` and grouped spline coefficients ``beta`` of shape ``(p, m)``."""

    mu: float
    beta: np.ndarray

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def m(self) -> int:
        return self.beta.shape[1]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.mu], self.beta.ravel()])

    @classmethod
    def from_vector(cls, vec, p: int, m: int) -> "Coefficients":
        vec = np.asarray(vec, dtype=float)
        if vec.size != p * m + 1:
            raise ValueError(f"expected {p * m + 1} coefficients, got {vec.size}")
        return cls(vec[0], vec[1:].reshape(p, m))

    @classmethod
    def zeros(cls, p: int, m: int, mu: float = 0.0) -> "Coefficients":
        return cls(mu, np.zeros((p, m)))


def log_density(residual, sigma2: float):
    r = np.asarray(residual, dtype=float)
    return -0.5 * (LOG_2PI + np.log(sigma2)) - r * r / (2.0 * sigma2)


def density(residual, sigma2: float):
    """Normal density N(0, sigma2) at ``residual``, evaluated through its log."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    return np.exp(log_density(residual, sigma2))


def residual_weights(residual, nu: float, sigma2: float) -> np.ndarray:
    """``f_i^nu`` from residuals; values below 1e-300 are set to 0."""
    r = np.asarray(residual, dtype=float)
    if nu == 0.0:
        return np.ones_like(r)
    w = np.exp(nu * log_density(r, sigma2))
    return np.where(w < WEIGHT_FLOOR, 0.0, w)


def dpd_constant(nu: float, sigma2: float) -> float:
    """Parameter-dependent first term of ``V_i``."""
    return float(np.exp(-0.5 * nu * (LOG_2PI + np.log(sigma2))) / np.sqrt(1.0 + nu))


def v_term(residual, params: DpdParams):
    """Per-observation DPD loss ``V_i`` (``nu > 0``)."""
    nu, s2 = params.nu, params.sigma2
    if nu == 0.0:
        raise ValueError("v_term needs nu > 0; use the log-likelihood branch for nu = 0")
    out = dpd_constant(nu, s2) - (1.0 + nu) / nu * residual_weights(residual, nu, s2)
    return out


def observation_loss(residual, params: DpdParams):
    """``V_i`` for ``nu > 0`` and ``-log f_i`` for ``nu = 0``."""
    if params.nu == 0.0:
        return -log_density(residual, params.sigma2)
    return v_term(residual, params)


def residuals(coef: Coefficients, design, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    vec = coef.as_vector()
    if vec.size != design.Z.shape[1] or y.size != design.n:
        raise ValueError("dimension mismatch between coefficients, design and response")
    return y - design.Z @ vec


def group_norms(beta, design) -> np.ndarray:
    """``||beta_j||_{D_j}`` for every group."""
    beta = np.atleast_2d(beta)
    white = np.einsum("jkl,jk->jl", design.chol, beta)  # L_j^T beta_j
    return np.linalg.norm(white, axis=1)


def penalty_total(beta, design, penalty: PenaltySpec | None) -> float:
    if penalty is None or penalty.lam == 0.0:
        return 0.0
    return float(np.sum(penalty_value(group_norms(beta, design), penalty)))


def loss_from_residuals(r, params: DpdParams) -> float:
    return float(np.mean(observation_loss(r, params)))


def loss_scale(nu: float, sigma2: float) -> float:
    """Expected curvature scale of the mean loss in the regression coefficients.

    ``(1 + nu) E[f^nu] / sigma^2`` under the working model, equal to
    ``(1 + nu)^{1/2} (2 pi sigma^2)^{-nu/2} / sigma^2``; ``1 / sigma^2`` at
    ``nu = 0``. Dividing the loss by it gives the coefficient problem unit
    curvature, so ``lambda`` is on the least-squares scale for every ``nu``.
    """
    return (1.0 + nu) * dpd_constant(nu, sigma2) / sigma2


def penalized_from_residuals(r, beta, design, params: DpdParams, penalty: PenaltySpec | None) -> float:
    return loss_from_residuals(r, params) / loss_scale(params.nu, params.sigma2) + penalty_total(
        beta, design, penalty
    )


def objective(coef: Coefficients, params: DpdParams, design, y, penalty: PenaltySpec | None = None) -> float:
    """Penalized coefficient objective at a fixed scale.

    ``(1/n) sum V_i / s(sigma^2) + sum_j P_lambda(||beta_j||_{D_j})`` with
    ``s`` from :func:`loss_scale`. For ``nu = 0`` this is the penalized
    residual sum of squares ``RSS / (2n)`` plus a constant in ``sigma^2``.
    """
    r = residuals(coef, design, y)
    return penalized_from_residuals(r, coef.beta, design, params, penalty)


def gradient_beta(coef: Coefficients, params: DpdParams, design, y) -> np.ndarray:
    """Gradient of the unpenalized loss in ``(mu, beta)``.

    ``-(1 + nu) / (n sigma^2) * sum_i f_i^nu r_i Z_i``; unit weights for ``nu = 0``.
    """
    r = residuals(coef, design, y)
    w = residual_weights(r, params.nu, params.sigma2)
    return -(1.0 + params.nu) / (design.n * params.sigma2) * (design.Z.T @ (w * r))


def gradient_sigma2_from_residuals(r, params: DpdParams) -> float:
    nu, s2 = params.nu, params.sigma2
    r = np.asarray(r, dtype=float)
    if nu == 0.0:
        return float(0.5 / s2 - np.mean(r * r) / (2.0 * s2 * s2))
    w = residual_weights(r, nu, s2)
    inner = -nu * dpd_constant(nu, s2) + (1.0 + nu) * np.mean((1.0 - r * r / s2) * w)
    return float(inner / (2.0 * s2))


def gradient_sigma2(coef: Coefficients, params: DpdParams, design, y) -> float:
    """Derivative of the mean loss with respect to ``sigma^2``."""
    return gradient_sigma2_from_residuals(residuals(coef, design, y), params)


def sigma2_estimating_equation(r, nu: float, sigma2: float) -> float:
    """Left side of the ``sigma^2`` normal equation (sum form, ``nu > 0``).

    ``-n nu / ((2 pi)^{nu/2} sigma^nu (1 + nu)^{3/2}) + sum (1 - r^2 / sigma^2) f^nu``
    """
    r = np.asarray(r, dtype=float)
    w = residual_weights(r, nu, sigma2)
    n = r.size
    first = n * nu * np.exp(-0.5 * nu * (LOG_2PI + np.log(sigma2))) / (1.0 + nu) ** 1.5
    return float(-first + np.sum((1.0 - r * r / sigma2) * w))


def weights(coef: Coefficients, params: DpdParams, design, y) -> np.ndarray:
    """Diagonal of ``W_nu``: ``f_i^nu`` at the current fit."""
    return residual_weights(residuals(coef, design, y), params.nu, params.sigma2)
