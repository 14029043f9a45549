"""Empirical influence functions and standardized-residual summaries.

The influence function is taken at a fixed scale ``sigma_hat`` with the
training sample standing in for the population. For the penalized estimating
equation

    -(1 + nu) / sigma^2 * E[f^nu r Z] + s * dP(beta) = 0,

where ``s`` is the loss scale of :func:`dpdam.loss.loss_scale``, contaminating
the sample at ``(x0, y0)`` gives

    IF = S^{-1} (1 + nu) / sigma^2 * (E[f^nu r Z] - f0^nu r0 Z0),
    S  = (1 + nu) / sigma^2 * E[f^nu (nu r^2 / sigma^2 - 1) Z Z^T] - s * d2P(beta).

Only the second term in the bracket depends on ``y0``; for ``nu > 0`` it is
bounded because ``t exp(-nu t^2 / 2)`` is.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .basis import CenteredDesign, centered_rows
from .errors import SingularSystemError
from .loss import loss_scale, residual_weights
from .penalty import PenaltySpec, penalty_derivative, penalty_second_derivative
from .solver import ModelFit

SINGULAR_CONDITION = 1e14
BREAKPOINT_NUDGE = 1e-8
BOXPLOT_COLUMNS = ("component", "q1", "median", "q3", "lo_whisker", "hi_whisker", "n_outliers")


@dataclass
class InfluenceReport:
    """Empirical influence of a point mass at ``(x0, y0)`` on ``(mu, beta)``.

    ``y0_term`` is the part of ``if_vector`` driven by the contamination
    point's residual; ``base_term`` is the sample-average part, which does not
    depend on ``y0``.
    """

    x0: np.ndarray
    y0: float
    if_vector: np.ndarray
    if_norm: float
    y0_term_norm: float
    base_term_norm: float
    s_matrix_condition: float
    solve_residual: float
    kind: str = "empirical"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["x0"] = [float(v) for v in self.x0]
        out["if_vector"] = [float(v) for v in self.if_vector]
        return out


@dataclass
class InfluenceSweep:
    offsets: np.ndarray
    y0: np.ndarray
    if_norm: np.ndarray
    y0_term_norm: np.ndarray
    s_matrix_condition: float

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def _rows_for(fit: ModelFit, x0) -> np.ndarray:
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[1] != fit.p:
        raise ValueError(f"expected {fit.p} covariates, got {x0.shape[1]}")
    if fit.scaler is not None:
        x0, _ = fit.scaler.transform(x0, clamp=True)
    return centered_rows(fit.basis, x0, fit.column_means)


def _nudge(t: float, penalty: PenaltySpec) -> float:
    """Move a group norm off the SCAD/MCP breakpoints, where ``P''`` jumps."""
    lam = penalty.lam
    breaks = [lam]
    if penalty.kind in ("scad", "mcp"):
        breaks.append(penalty.shape * lam)
    for b in breaks:
        if abs(t - b) <= BREAKPOINT_NUDGE * max(1.0, b):
            return t + BREAKPOINT_NUDGE * max(1.0, b)
    return t


def penalty_hessian(fit: ModelFit, design: CenteredDesign) -> np.ndarray:
    """Block-diagonal curvature of ``sum_j P(||beta_j||_{D_j})``; zero for inactive groups."""
    k = design.Z.shape[1]
    H = np.zeros((k, k))
    pen = fit.penalty
    if pen is None or pen.lam == 0.0:
        return H
    for j in fit.active_set:
        b = fit.coef.beta[j]
        D = design.gram[j]
        Db = D @ b
        t = _nudge(float(np.sqrt(b @ Db)), pen)
        d1 = float(penalty_derivative(t, pen))
        d2 = float(penalty_second_derivative(t, pen))
        sl = design.group_slice(j)
        H[sl, sl] = d1 / t * D + (d2 / t**2 - d1 / t**3) * np.outer(Db, Db)
    return H


def s_matrix(fit: ModelFit, design: CenteredDesign, y) -> np.ndarray:
    r = np.asarray(y, dtype=float) - design.Z @ fit.coef.as_vector()
    nu, s2 = fit.nu, fit.sigma2
    w = residual_weights(r, nu, s2) * (nu * r * r / s2 - 1.0)
    E = (design.Z * w[:, None]).T @ design.Z / design.n
    return (1.0 + nu) / s2 * E - loss_scale(nu, s2) * penalty_hessian(fit, design)


class _Influence:
    """Factorized pieces shared by every contamination point of one fit."""

    def __init__(self, fit: ModelFit, design: CenteredDesign, y):
        self.fit = fit
        y = np.asarray(y, dtype=float)
        if y.size != design.n:
            raise ValueError("response length does not match the design")
        S = s_matrix(fit, design, y)
        self.S = S
        self.condition = float(np.linalg.cond(S))
        if not np.isfinite(self.condition) or self.condition > SINGULAR_CONDITION:
            raise SingularSystemError(
                f"influence matrix S is singular (condition number {self.condition:.3e})", self.condition
            )
        r = y - design.Z @ fit.coef.as_vector()
        self.c = (1.0 + fit.nu) / fit.sigma2
        w = residual_weights(r, fit.nu, fit.sigma2)
        self.base_rhs = self.c * (design.Z.T @ (w * r)) / design.n
        self.base = np.linalg.solve(S, self.base_rhs)

    def point(self, x0, y0):
        z0 = _rows_for(self.fit, x0)[0]
        r0 = float(y0) - float(z0 @ self.fit.coef.as_vector())
        w0 = float(residual_weights(np.array([r0]), self.fit.nu, self.fit.sigma2)[0])
        rhs_point = self.c * w0 * r0 * z0
        y0_term = np.linalg.solve(self.S, rhs_point)
        vec = self.base - y0_term
        rhs = self.base_rhs - rhs_point
        resid = float(np.linalg.norm(self.S @ vec - rhs))
        scale = float(np.linalg.norm(rhs))
        return vec, y0_term, resid / scale if scale > 0 else resid


def influence_at(fit: ModelFit, design: CenteredDesign, y, x0, y0: float) -> InfluenceReport:
    """Empirical influence function of ``(mu, beta)`` at ``(x0, y0)``.

    ``x0`` is on the fit's input scale (raw when the fit carries a scaler).
    Raises :class:`SingularSystemError` with the condition number when ``S``
    cannot be inverted reliably.
    """
    inf = _Influence(fit, design, y)
    vec, y0_term, resid = inf.point(x0, y0)
    return InfluenceReport(
        x0=np.asarray(x0, dtype=float).ravel(),
        y0=float(y0),
        if_vector=vec,
        if_norm=float(np.linalg.norm(vec)),
        y0_term_norm=float(np.linalg.norm(y0_term)),
        base_term_norm=float(np.linalg.norm(inf.base)),
        s_matrix_condition=inf.condition,
        solve_residual=resid,
    )


def default_offsets(max_decade: int = 4, per_decade: int = 8) -> np.ndarray:
    """Symmetric grid ``0, +-10^k`` in multiples of ``sigma_hat``, ``k`` from -1 to ``max_decade``."""
    pos = np.logspace(-1, max_decade, (max_decade + 1) * per_decade + 1)
    return np.concatenate([-pos[::-1], [0.0], pos])


def influence_sweep(fit: ModelFit, design: CenteredDesign, y, x0, offsets=None) -> InfluenceSweep:
    """``||IF||`` along ``y0 = yhat(x0) + offset * sigma_hat``."""
    offsets = default_offsets() if offsets is None else np.asarray(offsets, dtype=float)
    inf = _Influence(fit, design, y)
    z0 = _rows_for(fit, x0)[0]
    center = float(z0 @ fit.coef.as_vector())
    sd = float(np.sqrt(fit.sigma2))
    y0s = center + offsets * sd
    norms, terms = np.empty(offsets.size), np.empty(offsets.size)
    for i, y0 in enumerate(y0s):
        vec, t, _ = inf.point(x0, y0)
        norms[i] = np.linalg.norm(vec)
        terms[i] = np.linalg.norm(t)
    return InfluenceSweep(offsets, y0s, norms, terms, inf.condition)


# ---------------------------------------------------------------- residuals


@dataclass
class BoxStats:
    q1: float
    median: float
    q3: float
    lo_whisker: float
    hi_whisker: float
    n_outliers: int


def box_stats(values) -> BoxStats:
    """Quartiles and Tukey whiskers: the most extreme values within 1.5 IQR of the box."""
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return BoxStats(
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        lo_whisker=float(inside.min()),
        hi_whisker=float(inside.max()),
        n_outliers=int(v.size - inside.size),
    )


@dataclass
class ResidualSummary:
    standardized: np.ndarray
    n_beyond_2: int
    n_beyond_3: int
    box: BoxStats

    @property
    def n(self) -> int:
        return self.standardized.size

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_beyond_2": self.n_beyond_2,
            "n_beyond_3": self.n_beyond_3,
            "box": asdict(self.box),
            "standardized": [float(v) for v in self.standardized],
        }


def summarize_standardized(z) -> ResidualSummary:
    z = np.asarray(z, dtype=float).ravel()
    return ResidualSummary(
        standardized=z,
        n_beyond_2=int(np.sum(np.abs(z) > 2.0)),
        n_beyond_3=int(np.sum(np.abs(z) > 3.0)),
        box=box_stats(z),
    )


def residual_summary(fit: ModelFit, design: CenteredDesign, y) -> ResidualSummary:
    """Residuals divided by ``sigma_hat``, threshold counts and box-plot statistics."""
    r = np.asarray(y, dtype=float) - design.Z @ fit.coef.as_vector()
    return summarize_standardized(r / np.sqrt(fit.sigma2))


def boxplot_csv(summaries: dict, fmt=lambda x: f"{x:.17g}") -> str:
    """One row per named residual summary with the fixed box-plot columns."""
    lines = [",".join(BOXPLOT_COLUMNS)]
    for name, s in summaries.items():
        b = s.box
        vals = [fmt(b.q1), fmt(b.median), fmt(b.q3), fmt(b.lo_whisker), fmt(b.hi_whisker), str(b.n_outliers)]
        lines.append(",".join([str(name)] + vals))
    return "\n".join(lines) + "\n"


def to_json(obj, **kw) -> str:
    """JSON for reports; floats keep full precision and non-finite values become strings."""

    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, (float, np.floating)):
            x = float(x)
            return x if np.isfinite(x) else repr(x)
        if isinstance(x, np.integer):
            return int(x)
        return x

    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    return json.dumps(clean(payload), indent=2, sort_keys=True, **kw)
