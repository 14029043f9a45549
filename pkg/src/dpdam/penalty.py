"""Folded-concave group penalties and their group threshold operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky

SCAD = "scad"
MCP = "mcp"
GROUP_LASSO = "glasso"
KINDS = (SCAD, MCP, GROUP_LASSO)
DEFAULT_SHAPE = {SCAD: 3.7, MCP: 3.0, GROUP_LASSO: 0.0}


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family, level ``lam`` and shape ``a`` (ignored for group lasso)."""

    kind: str = SCAD
    lam: float = 0.0
    shape: float | None = None

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind in ("grouplasso", "group_lasso", "lasso"):
            kind = GROUP_LASSO
        if kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        shape = DEFAULT_SHAPE[kind] if self.shape is None else float(self.shape)
        if not self.lam >= 0.0:
            raise ValueError("penalty level must be >= 0")
        if kind == SCAD and shape <= 2.0:
            raise ValueError("SCAD shape must exceed 2")
        if kind == MCP and shape <= 1.0:
            raise ValueError("MCP shape must exceed 1")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "shape", shape)

    def with_lam(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.kind, lam, self.shape)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("penalty argument must be non-negative")
    return t


def penalty_value(t, spec: PenaltySpec):
    """``P_lambda(t)`` for ``t >= 0``."""
    t = _check_t(t)
    lam, a = spec.lam, spec.shape
    if spec.kind == GROUP_LASSO:
        out = lam * t
    elif spec.kind == SCAD:
        mid = (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
        out = np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, 0.5 * (a + 1.0) * lam * lam))
    else:
        out = np.where(t <= a * lam, lam * t - t * t / (2.0 * a), 0.5 * a * lam * lam)
    return out[()] if out.ndim == 0 else out


def penalty_derivative(t, spec: PenaltySpec):
    """``P'_lambda(t)``; at ``t = 0`` this is the right limit ``lambda``."""
    t = _check_t(t)
    lam, a = spec.lam, spec.shape
    if spec.kind == GROUP_LASSO:
        out = np.full_like(t, lam)
    elif spec.kind == SCAD:
        if lam == 0.0:
            out = np.zeros_like(t)
        else:
            out = lam * np.where(t <= lam, 1.0, np.maximum(a * lam - t, 0.0) / ((a - 1.0) * lam))
    else:
        out = np.maximum(a * lam - t, 0.0) / a
    return out[()] if out.ndim == 0 else out


def penalty_second_derivative(t, spec: PenaltySpec):
    """Almost-everywhere second derivative (right-continuous at breakpoints)."""
    t = _check_t(t)
    lam, a = spec.lam, spec.shape
    if spec.kind == GROUP_LASSO:
        out = np.zeros_like(t)
    elif spec.kind == SCAD:
        out = np.where((t > lam) & (t < a * lam), -1.0 / (a - 1.0), 0.0)
    else:
        out = np.where(t < a * lam, -1.0 / a, 0.0)
    return out[()] if out.ndim == 0 else out


def soft_threshold(x, t: float) -> np.ndarray:
    """Multivariate soft threshold ``(1 - t / ||x||)_+ x``."""
    x = np.asarray(x, dtype=float)
    if t < 0:
        raise ValueError("threshold must be non-negative")
    nrm = np.linalg.norm(x)
    if nrm <= t or nrm == 0.0:
        return np.zeros_like(x)
    return (1.0 - t / nrm) * x


def scad_threshold(x, lam: float, gamma: float = 3.7) -> np.ndarray:
    """Closed-form group SCAD threshold (unit curvature)."""
    if gamma <= 2.0:
        raise ValueError("SCAD gamma must exceed 2")
    x = np.asarray(x, dtype=float)
    nrm = np.linalg.norm(x)
    if nrm <= 2.0 * lam:
        return soft_threshold(x, lam)
    if nrm <= gamma * lam:
        return soft_threshold(x, gamma * lam / (gamma - 1.0)) * (gamma - 1.0) / (gamma - 2.0)
    return x.copy()


def mcp_threshold(x, lam: float, gamma: float = 3.0) -> np.ndarray:
    """Closed-form group MCP (firm) threshold (unit curvature)."""
    if gamma <= 1.0:
        raise ValueError("MCP gamma must exceed 1")
    x = np.asarray(x, dtype=float)
    if np.linalg.norm(x) <= gamma * lam:
        return soft_threshold(x, lam) * gamma / (gamma - 1.0)
    return x.copy()


def threshold(x, spec: PenaltySpec) -> np.ndarray:
    """Closed-form proximal map of ``P_lambda(||.||)`` at unit curvature."""
    if spec.kind == SCAD:
        return scad_threshold(x, spec.lam, spec.shape)
    if spec.kind == MCP:
        return mcp_threshold(x, spec.lam, spec.shape)
    return soft_threshold(x, spec.lam)


def _radial_candidates(u: float, s: float, spec: PenaltySpec) -> list:
    lam, a = spec.lam, spec.shape
    cands = [0.0]
    if spec.kind == GROUP_LASSO:
        cands.append(max(u - s * lam, 0.0))
        return cands
    if spec.kind == SCAD:
        cands += [min(max(u - s * lam, 0.0), lam), lam, a * lam, max(u, a * lam)]
        curv = 1.0 - s / (a - 1.0)
        if curv > 0.0:
            t = (u - s * a * lam / (a - 1.0)) / curv
            cands.append(min(max(t, lam), a * lam))
        return cands
    cands += [a * lam, max(u, a * lam)]
    curv = 1.0 - s / a
    if curv > 0.0:
        cands.append(min(max((u - s * lam) / curv, 0.0), a * lam))
    return cands


def group_prox(x, spec: PenaltySpec, step: float = 1.0) -> np.ndarray:
    """Exact minimizer of ``0.5 ||z - x||^2 + step * P_lambda(||z||)``.

    The problem is radial, so the minimizer is ``t * x / ||x||`` with ``t``
    the best of the piecewise stationary points and breakpoints. At
    ``step = 1`` this coincides with :func:`threshold`.
    """
    x = np.asarray(x, dtype=float)
    u = float(np.linalg.norm(x))
    if u == 0.0 or spec.lam == 0.0:
        return x.copy()
    cands = np.array(_radial_candidates(u, step, spec))
    vals = 0.5 * (cands - u) ** 2 + step * penalty_value(cands, spec)
    t = cands[int(np.argmin(vals))]
    if t == 0.0:
        return np.zeros_like(x)
    return (t / u) * x


def gram_norm(beta_j, D) -> float:
    """``sqrt(beta' D beta)`` through the Cholesky factor of ``D``."""
    D = np.asarray(D, dtype=float)
    try:
        L = cholesky(D, lower=True)
    except LinAlgError as exc:
        raise ValueError("Gram matrix is not positive definite") from exc
    return float(np.linalg.norm(L.T @ np.asarray(beta_j, dtype=float)))
