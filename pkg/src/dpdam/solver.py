"""Unpenalized and penalized minimum-DPD fitting of the additive spline model.

The coefficients and the scale are estimated jointly: for fixed ``sigma^2``
the coefficients minimize the penalized objective of
:func:`dpdam.loss.objective` (the DPD loss divided by its expected curvature
scale, plus the group penalty), and for fixed coefficients ``sigma^2`` solves
the DPD scale equation.

Both blocks are majorize-minimize steps. For fixed ``sigma^2`` the DPD loss
is a concave function of each squared residual, so its tangent in ``r_i^2``
gives the weighted least-squares surrogate

    c / 2 * sum_i f_i^nu (y_i - Z_i' beta)^2,   c = 1 / (n E[f^nu])

with the weights frozen at the current iterate. Decreasing the surrogate plus
penalty therefore never increases the coefficient objective. Penalized fits
run block coordinate descent on the surrogate in whitened coordinates
``theta_j = L_j' beta_j`` (``D_j = L_j L_j'``) where the penalty argument
``||beta_j||_{D_j}`` is the Euclidean norm of ``theta_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import linprog

from .basis import CenteredDesign, SplineBasis, UnitScaler, centered_rows
from .errors import DescentError, SingularSystemError
from .loss import (
    Coefficients,
    DpdParams,
    dpd_constant,
    loss_from_residuals,
    loss_scale,
    residual_weights,
)
from .penalty import PenaltySpec, group_prox, penalty_value, threshold

log = logging.getLogger(__name__)

DESCENT_SLACK = 1e-8


@dataclass(frozen=True)
class FitConfig:
    """Iteration controls shared by all fits.

    ``sigma2_form`` selects the scale update: ``"eq9"`` solves the scale
    normal equation directly, ``"eq10"`` is the trace-normalized form kept for
    comparison. ``mu_mode="fixed"`` keeps the starting intercept instead of
    refreshing it every pass. ``group_metric="weighted"`` measures the penalty
    in the current weighted Gram metric, so each block step is the closed-form
    unit-curvature threshold; the working objective then moves with the
    weights and the descent check is skipped.

    With many spline parameters and ``nu > 0`` the DPD objective can decrease
    without bound by interpolating a subset of points while ``sigma^2 -> 0``.
    A fit whose scale falls below ``collapse_ratio`` times its starting value,
    or onto the floor, stops early and is flagged ``degenerate``. Collapsing
    fits also disown a large part of the sample before the scale gets small:
    the inlier share ``mean(f^nu) / E[f^nu]`` (about ``1 - eps`` for a sound
    fit with a fraction ``eps`` of outliers) falls below ``min_inlier_share``
    on a step that did not raise the scale, which is treated the same way.
    """

    max_outer_iters: int = 200
    max_cd_passes: int = 1
    tol_beta: float = 1e-6
    tol_sigma2: float = 1e-6
    ridge_eps: float = 1e-8
    sigma2_floor_rel: float = 1e-8
    damping: float = 0.5
    sigma2_form: str = "eq9"
    mu_mode: str = "refresh"
    group_metric: str = "gram"
    random_order: bool = False
    seed: int = 0
    collapse_ratio: float = 1e-3
    min_inlier_share: float = 0.9

    def __post_init__(self):
        if self.max_outer_iters < 1 or self.max_cd_passes < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.tol_beta <= 0 or self.tol_sigma2 <= 0:
            raise ValueError("tolerances must be > 0")
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be >= 0")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.sigma2_form not in ("eq9", "eq10"):
            raise ValueError("sigma2_form must be 'eq9' or 'eq10'")
        if not 0.0 <= self.min_inlier_share < 1.0 or not 0.0 <= self.collapse_ratio < 1.0:
            raise ValueError("min_inlier_share and collapse_ratio must lie in [0, 1)")
        if self.mu_mode not in ("refresh", "fixed"):
            raise ValueError("mu_mode must be 'refresh' or 'fixed'")
        if self.group_metric not in ("gram", "weighted"):
            raise ValueError("group_metric must be 'gram' or 'weighted'")


@dataclass
class ModelFit:
    """A fitted additive model.

    ``objective_trace`` records what the fit minimized: the mean DPD loss for
    unpenalized and intercept-only fits, the penalized coefficient objective
    for penalized fits.
    """

    coef: Coefficients
    sigma2: float
    nu: float
    penalty: PenaltySpec | None
    basis: SplineBasis
    column_means: np.ndarray
    converged: bool
    iterations: int
    objective_trace: list = field(default_factory=list)
    scaler: UnitScaler | None = None
    degenerate: bool = False
    inlier_share: float = 1.0

    @property
    def usable(self) -> bool:
        """Converged to a non-degenerate scale."""
        return self.converged and not self.degenerate

    @property
    def active_set(self) -> tuple:
        norms = np.linalg.norm(self.coef.beta, axis=1)
        return tuple(int(j) for j in np.flatnonzero(norms > 0.0))

    @property
    def df(self) -> int:
        """Intercept plus ``m`` coefficients per active group."""
        return 1 + self.basis.m * len(self.active_set)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")

    @property
    def lam(self) -> float:
        return 0.0 if self.penalty is None else self.penalty.lam

    @property
    def p(self) -> int:
        return self.coef.p


def sigma2_floor(y, config: FitConfig) -> float:
    v = float(np.var(y))
    return config.sigma2_floor_rel * (v if v > 0 else 1.0)


def update_sigma2(
    residuals,
    weights,
    sigma2_old: float,
    nu: float,
    floor: float = 0.0,
    damping: float = 0.5,
    form: str = "eq9",
) -> float:
    """One damped fixed-point step for ``sigma^2``.

    ``weights`` must be ``f_i^nu`` evaluated at ``sigma2_old``. The ``"eq9"``
    target is the root form of the scale normal equation,

        [sum r^2 f^nu + n nu sigma^2 (2 pi sigma^2)^{-nu/2} (1+nu)^{-3/2}] / sum f^nu.

    For ``nu = 0`` the step is the exact maximum likelihood variance.
    """
    r = np.asarray(residuals, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = r.size
    if not sigma2_old > 0:
        raise ValueError("sigma2_old must be > 0")
    if nu == 0.0:
        return max(float(np.mean(r * r)), floor)
    sw = float(np.sum(w))
    if sw <= 0.0:
        return max(sigma2_old, floor)
    scale = (2.0 * np.pi * sigma2_old) ** (-0.5 * nu) / (1.0 + nu) ** 1.5
    if form == "eq9":
        target = (float(np.sum(r * r * w)) + n * nu * sigma2_old * scale) / sw
    elif form == "eq10":
        target = (float(np.sum(r * r * w)) / n + nu * scale) / sw
    else:
        raise ValueError(f"unknown sigma2 update form {form!r}")
    new = (1.0 - damping) * sigma2_old + damping * target
    return max(new, floor)


def _sigma2_step(r, nu, s2, floor, config: FitConfig) -> float:
    """Scale update with backtracking so the loss never increases."""
    w = residual_weights(r, nu, s2)
    damping = 1.0 if nu == 0.0 else config.damping
    cand = update_sigma2(r, w, s2, nu, floor, damping, config.sigma2_form)
    base = loss_from_residuals(r, DpdParams(nu, s2))
    for _ in range(40):
        if loss_from_residuals(r, DpdParams(nu, cand)) <= base:
            return cand
        cand = 0.5 * (cand + s2)
    return s2


def _robust_scale2(r, floor: float) -> float:
    r = np.asarray(r, dtype=float)
    mad = 1.4826 * np.median(np.abs(r - np.median(r)))
    if not mad > 0:
        mad = np.std(r)
    return max(mad * mad, floor, 1e-300)


def _solve_weighted(Z, y, w, ridge_eps: float) -> np.ndarray:
    Zw = Z * w[:, None]
    A = Z.T @ Zw
    b = Zw.T @ y
    try:
        return cho_solve(cho_factor(A, lower=True), b)
    except LinAlgError:
        pass
    jitter = ridge_eps * max(np.trace(A) / A.shape[0], 1e-300)
    try:
        return cho_solve(cho_factor(A + jitter * np.eye(A.shape[0]), lower=True), b)
    except LinAlgError as exc:
        raise SingularSystemError("weighted Gram matrix is singular after jitter", np.inf) from exc


def _lad_start(Z, y) -> np.ndarray:
    """Least absolute deviations coefficients as a robust starting point."""
    n, k = Z.shape
    c = np.concatenate([np.zeros(k), np.ones(2 * n)])
    A_eq = np.hstack([Z, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * k + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise SingularSystemError("LAD start failed: " + res.message)
    return res.x[:k]


def inlier_share(r, nu: float, sigma2: float) -> float:
    """``mean(f_i^nu) / E[f^nu]`` with the expectation under the working model."""
    if nu == 0.0:
        return 1.0
    return float(np.mean(residual_weights(r, nu, sigma2)) / dpd_constant(nu, sigma2))


def _collapsed(r, nu, s2: float, s2_prev: float, s2_start: float, floor: float, config: FitConfig) -> bool:
    if s2 <= floor * (1.0 + 1e-9) or s2 < config.collapse_ratio * s2_start:
        return True
    # a low share while the scale is still growing is a start-up transient
    return s2 <= s2_prev and inlier_share(r, nu, s2) < config.min_inlier_share


def _make_fit(design, coef, s2, nu, penalty, converged, it, trace, scaler, degenerate=False, r=None) -> ModelFit:
    return ModelFit(
        degenerate=bool(degenerate),
        inlier_share=1.0 if r is None else inlier_share(r, nu, s2),
        coef=coef,
        sigma2=float(s2),
        nu=float(nu),
        penalty=penalty,
        basis=design.basis,
        column_means=np.array(design.column_means),
        converged=bool(converged),
        iterations=int(it),
        objective_trace=list(trace),
        scaler=scaler,
    )


def _check_descent(new: float, old: float):
    if new > old + DESCENT_SLACK * max(1.0, abs(old)):
        raise DescentError(f"objective increased from {old!r} to {new!r}")


def fit_unpenalized(design: CenteredDesign, y, nu: float, config: FitConfig | None = None, scaler=None) -> ModelFit:
    """Unpenalized MDPDE by alternating weighted least squares and the scale step.

    ``nu = 0`` is ordinary least squares in one pass. Non-convergence after
    ``max_outer_iters`` is reported through ``converged`` rather than raised.
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float)
    Z = design.Z
    n, k = Z.shape
    if y.size != n:
        raise ValueError("response length does not match the design")
    floor = sigma2_floor(y, config)
    p, m = design.p, design.m

    if nu == 0.0:
        b = _solve_weighted(Z, y, np.ones(n), config.ridge_eps)
        r = y - Z @ b
        s2 = max(float(np.mean(r * r)), floor)
        obj = loss_from_residuals(r, DpdParams(0.0, s2))
        degenerate = s2 <= floor * (1.0 + 1e-9)
        return _make_fit(
            design, Coefficients.from_vector(b, p, m), s2, 0.0, None, True, 1, [obj], scaler, degenerate
        )

    try:
        b = _lad_start(Z, y) if n > k else _solve_weighted(Z, y, np.ones(n), config.ridge_eps)
    except SingularSystemError:
        b = _solve_weighted(Z, y, np.ones(n), config.ridge_eps)
    r = y - Z @ b
    s2 = _robust_scale2(r, floor)
    s2_start = s2
    obj = loss_from_residuals(r, DpdParams(nu, s2))
    trace = [obj]
    converged = degenerate = False
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        w = residual_weights(r, nu, s2)
        if not np.any(w > 0):
            raise SingularSystemError("all DPD weights underflowed")
        b_new = _solve_weighted(Z, y, w, config.ridge_eps)
        r = y - Z @ b_new
        s2_new = _sigma2_step(r, nu, s2, floor, config)
        obj_new = loss_from_residuals(r, DpdParams(nu, s2_new))
        _check_descent(obj_new, obj)
        db = np.max(np.abs(b_new - b)) / max(1.0, np.max(np.abs(b)))
        ds = abs(s2_new - s2) / s2
        s2_prev = s2
        b, s2, obj = b_new, s2_new, obj_new
        trace.append(obj)
        if _collapsed(r, nu, s2, s2_prev, s2_start, floor, config):
            degenerate = True
            break
        if db <= config.tol_beta and ds <= config.tol_sigma2:
            converged = True
            break
    return _make_fit(
        design, Coefficients.from_vector(b, p, m), s2, nu, None, converged, it, trace, scaler, degenerate, r
    )


def fit_null(design: CenteredDesign, y, nu: float, config: FitConfig | None = None, scaler=None) -> ModelFit:
    """Intercept-only MDPDE started from the median and MAD."""
    config = config or FitConfig()
    y = np.asarray(y, dtype=float)
    floor = sigma2_floor(y, config)
    p, m = design.p, design.m
    if nu == 0.0:
        mu = float(np.mean(y))
        s2 = max(float(np.mean((y - mu) ** 2)), floor)
        obj = loss_from_residuals(y - mu, DpdParams(0.0, s2))
        return _make_fit(design, Coefficients.zeros(p, m, mu), s2, 0.0, None, True, 1, [obj], scaler)
    mu = float(np.median(y))
    s2 = _robust_scale2(y - mu, floor)
    obj = loss_from_residuals(y - mu, DpdParams(nu, s2))
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        w = residual_weights(y - mu, nu, s2)
        sw = w.sum()
        if sw <= 0:
            raise SingularSystemError("all DPD weights underflowed")
        mu_new = float(np.sum(w * y) / sw)
        r = y - mu_new
        s2_new = _sigma2_step(r, nu, s2, floor, config)
        obj_new = loss_from_residuals(r, DpdParams(nu, s2_new))
        _check_descent(obj_new, obj)
        dm = abs(mu_new - mu) / max(1.0, abs(mu))
        ds = abs(s2_new - s2) / s2
        mu, s2, obj = mu_new, s2_new, obj_new
        trace.append(obj)
        if dm <= config.tol_beta and ds <= config.tol_sigma2:
            converged = True
            break
    return _make_fit(design, Coefficients.zeros(p, m, mu), s2, nu, None, converged, it, trace, scaler, False, y - mu)


def standardize_group(Zj, weights):
    """Cholesky transform ``R`` with ``(Zj R^-1)' W (Zj R^-1) = I``.

    Returns ``(R, R_inv)``; coefficients map as ``phi = R beta``.
    """
    Zj = np.asarray(Zj, dtype=float)
    w = np.asarray(weights, dtype=float)
    A = Zj.T @ (w[:, None] * Zj)
    try:
        R = cholesky(0.5 * (A + A.T), lower=False)
    except LinAlgError as exc:
        raise SingularSystemError("group weighted Gram matrix is rank deficient") from exc
    R_inv = solve_triangular(R, np.eye(R.shape[0]), lower=False)
    return R, R_inv


def _theta_from_beta(design: CenteredDesign, beta) -> np.ndarray:
    return np.einsum("jkl,jk->jl", design.chol, np.atleast_2d(beta))


def _beta_from_theta(design: CenteredDesign, theta) -> np.ndarray:
    beta = np.empty_like(theta)
    for j in range(theta.shape[0]):
        beta[j] = solve_triangular(design.chol[j].T, theta[j], lower=False)
    return beta


def lambda_max(design: CenteredDesign, y, null: ModelFit) -> float:
    """Smallest ``lambda`` at which the null model satisfies every group's zero condition."""
    y = np.asarray(y, dtype=float)
    r = y - null.coef.mu
    nu, s2 = null.nu, null.sigma2
    w = residual_weights(r, nu, s2)
    c = 1.0 / (design.n * dpd_constant(nu, s2))
    g = c * np.einsum("npm,n->pm", design.Z_white, w * r)
    return float(np.max(np.linalg.norm(g, axis=1)))


def _concavity(penalty: PenaltySpec) -> float:
    """Largest negative curvature of the penalty, ``sup -P''``."""
    if penalty.lam == 0.0 or penalty.kind == "glasso":
        return 0.0
    return 1.0 / (penalty.shape - 1.0) if penalty.kind == "scad" else 1.0 / penalty.shape


def _coef_objective(r, theta, nu, s2, penalty) -> float:
    return loss_from_residuals(r, DpdParams(nu, s2)) / loss_scale(nu, s2) + _penalty_theta(theta, penalty)


def _penalty_theta(theta, penalty: PenaltySpec | None) -> float:
    if penalty is None or penalty.lam == 0.0:
        return 0.0
    return float(np.sum(penalty_value(np.linalg.norm(theta, axis=1), penalty)))


def fit_penalized(
    design: CenteredDesign,
    y,
    nu: float,
    penalty: PenaltySpec | None,
    config: FitConfig | None = None,
    warm_start: ModelFit | None = None,
    scaler=None,
) -> ModelFit:
    """Penalized MDPDE by blockwise coordinate descent with group thresholding.

    Each outer iteration refreshes the weights ``f_i^nu``, runs
    ``max_cd_passes`` passes over the groups (ascending order unless
    ``random_order``), re-centres the intercept as the weighted mean of the
    partial residuals, and takes a scale step. Stops when the largest
    relative coefficient change is below ``tol_beta`` and the relative scale
    change below ``tol_sigma2``.

    Each pass is checked not to raise the coefficient objective at the scale
    it was run with (:class:`DescentError` otherwise). ``objective_trace``
    holds that objective after every pass, then once more at the final scale.
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float)
    n, p, m = design.n, design.p, design.m
    if y.size != n:
        raise ValueError("response length does not match the design")
    floor = sigma2_floor(y, config)
    if penalty is None:
        penalty = PenaltySpec("scad", 0.0)

    if warm_start is None:
        feasible = n > design.Z.shape[1]
        warm_start = fit_unpenalized(design, y, nu, config) if feasible else fit_null(design, y, nu, config)
    mu = warm_start.coef.mu
    theta = _theta_from_beta(design, warm_start.coef.beta)
    s2 = max(warm_start.sigma2, floor)
    s2_start = s2

    Zt = np.ascontiguousarray(design.Z_white.transpose(1, 0, 2))  # (p, n, m)
    r = y - mu - np.einsum("jnk,jk->n", Zt, theta)
    gram_metric = config.group_metric == "gram"
    kappa_floor = _concavity(penalty) * (1.0 + 1e-3)
    trace = []
    rng = np.random.default_rng(config.seed)
    order = np.arange(p)
    converged = degenerate = False
    it = 0

    for it in range(1, config.max_outer_iters + 1):
        mu_old, theta_old, s2_old = mu, theta.copy(), s2
        obj = _coef_objective(r, theta, nu, s2, penalty)
        w = residual_weights(r, nu, s2)
        sw = float(w.sum())
        if sw <= 0.0:
            raise SingularSystemError("all DPD weights underflowed")
        c = 1.0 / (n * dpd_constant(nu, s2))
        G = c * np.matmul(np.swapaxes(Zt * w[None, :, None], 1, 2), Zt)  # (p, m, m)
        if gram_metric:
            # any curvature bound >= the true one majorizes; flooring it at the
            # penalty's concavity keeps every group subproblem convex, so a
            # stationary zero block is never abandoned for a distant minimum
            kappa = np.maximum(np.linalg.eigvalsh(G)[:, -1], kappa_floor)
        for _ in range(config.max_cd_passes):
            if config.random_order:
                order = rng.permutation(p)
            for j in order:
                Zj = Zt[j]
                g = -c * (Zj.T @ (w * r))
                if gram_metric:
                    if kappa[j] <= 0.0:
                        continue
                    new = group_prox(theta[j] - g / kappa[j], penalty, 1.0 / kappa[j])
                else:
                    try:
                        R = cholesky(G[j], lower=False)
                    except LinAlgError:
                        continue
                    z = R @ theta[j] - solve_triangular(R, g, trans="T", lower=False)
                    new = solve_triangular(R, threshold(z, penalty), lower=False)
                d = new - theta[j]
                if np.any(d != 0.0):
                    r -= Zj @ d
                    theta[j] = new
            if config.mu_mode == "refresh":
                dmu = float(np.dot(w, r)) / sw
                mu += dmu
                r -= dmu
        obj_pass = _coef_objective(r, theta, nu, s2, penalty)
        if gram_metric:
            _check_descent(obj_pass, obj)
        s2 = _sigma2_step(r, nu, s2, floor, config)
        trace.append(obj_pass)
        if _collapsed(r, nu, s2, s2_old, s2_start, floor, config):
            degenerate = True
            break
        scale = max(1.0, abs(mu), float(np.max(np.linalg.norm(theta, axis=1), initial=0.0)))
        step = max(abs(mu - mu_old), float(np.max(np.linalg.norm(theta - theta_old, axis=1), initial=0.0)))
        if step / scale <= config.tol_beta and abs(s2 - s2_old) / s2_old <= config.tol_sigma2:
            converged = True
            break

    trace.append(_coef_objective(r, theta, nu, s2, penalty))
    if not converged:
        log.debug("penalized fit hit max_outer_iters (nu=%g, lam=%g)", nu, penalty.lam)
    coef = Coefficients(mu, _beta_from_theta(design, theta))
    return _make_fit(design, coef, s2, nu, penalty, converged, it, trace, scaler, degenerate, r)


def predict(fit: ModelFit, X_new, return_clamped: bool = False):
    """Fitted additive predictor and its per-covariate components.

    ``X_new`` is on the raw covariate scale when the fit carries a scaler,
    otherwise it must already lie in [0, 1]. Returns ``(yhat, components)``
    and, with ``return_clamped``, the number of clamped input entries.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[1] != fit.p:
        raise ValueError(f"expected {fit.p} covariate columns, got {X_new.shape[1]}")
    n_clamped = 0
    if fit.scaler is not None:
        X_new, n_clamped = fit.scaler.transform(X_new, clamp=True)
    rows = centered_rows(fit.basis, X_new, fit.column_means)
    B = rows[:, 1:].reshape(rows.shape[0], fit.p, fit.basis.m)
    comps = np.einsum("njk,jk->nj", B, fit.coef.beta)
    yhat = fit.coef.mu + comps.sum(axis=1)
    if return_clamped:
        return yhat, comps, n_clamped
    return yhat, comps


def fitted_values(fit: ModelFit, design: CenteredDesign) -> np.ndarray:
    return design.Z @ fit.coef.as_vector()


def stationarity(fit: ModelFit, design: CenteredDesign, y) -> dict:
    """First-order optimality residuals of a penalized fit.

    ``g`` is the gradient of the scaled loss at the fitted scale. Active
    groups: ``||g_j + P'(t_j) D_j beta_j / t_j||`` with ``t_j`` the ``D_j``
    norm. Inactive groups: excess of the dual norm ``||L_j^{-1} g_j||`` over
    ``P'(0+)``. Also the intercept gradient.
    """
    from .loss import gradient_beta
    from .penalty import penalty_derivative

    grad = gradient_beta(fit.coef, DpdParams(fit.nu, fit.sigma2), design, y) / loss_scale(fit.nu, fit.sigma2)
    pen = fit.penalty or PenaltySpec("scad", 0.0)
    out = {"intercept": abs(float(grad[0])), "active": {}, "inactive": {}}
    for j in range(design.p):
        g = grad[design.group_slice(j)]
        b = fit.coef.beta[j]
        D = design.gram[j]
        t = float(np.sqrt(b @ D @ b))
        if t > 0:
            out["active"][j] = float(np.linalg.norm(g + penalty_derivative(t, pen) * (D @ b) / t))
        else:
            dual = float(np.linalg.norm(solve_triangular(design.chol[j], g, lower=True)))
            out["inactive"][j] = max(0.0, dual - pen.lam)
    return out


def with_scaler(fit: ModelFit, scaler) -> ModelFit:
    return replace(fit, scaler=scaler)
