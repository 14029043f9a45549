"""B-spline bases on [0, 1] and the centered additive design matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular


@dataclass(frozen=True)
class KnotVector:
    """Open (clamped) knot vector on [0, 1].

    Parameters
    ----------
    order : int
        Spline order ``r`` (degree ``r - 1``).
    interior : ndarray
        Strictly increasing interior knots inside (0, 1).
    """

    order: int
    interior: np.ndarray

    def __post_init__(self):
        if int(self.order) < 1:
            raise ValueError("spline order must be >= 1")
        interior = np.asarray(self.interior, dtype=float).reshape(-1)
        if interior.size:
            if np.any(interior <= 0.0) or np.any(interior >= 1.0):
                raise ValueError("interior knots must lie strictly inside (0, 1)")
            if np.any(np.diff(interior) <= 0.0):
                raise ValueError("interior knots must be strictly increasing")
        interior.setflags(write=False)
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "interior", interior)

    @property
    def num_interior(self) -> int:
        return self.interior.size

    @property
    def full(self) -> np.ndarray:
        """All ``K + 2r`` knots, boundary knots repeated ``order`` times."""
        r = self.order
        return np.concatenate([np.zeros(r), self.interior, np.ones(r)])

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], self.interior, [1.0]])


@dataclass(frozen=True)
class SplineBasis:
    """Normalized B-spline basis; the last raw function is dropped for identifiability."""

    knots: KnotVector

    @property
    def order(self) -> int:
        return self.knots.order

    @property
    def n_raw(self) -> int:
        return self.knots.num_interior + self.knots.order

    @property
    def m(self) -> int:
        return self.n_raw - 1


def make_knots(num_interior: int, order: int) -> KnotVector:
    """Equally spaced interior knots ``i / (K + 1)``, ``i = 1..K``."""
    if order < 1:
        raise ValueError("spline order must be >= 1")
    if num_interior < 0:
        raise ValueError("num_interior must be >= 0")
    interior = np.arange(1, num_interior + 1) / (num_interior + 1.0)
    return KnotVector(order=order, interior=interior)


def make_basis(num_interior: int = 2, order: int = 4) -> SplineBasis:
    """Basis with ``m = num_interior + order - 1`` retained functions (default m = 5)."""
    basis = SplineBasis(make_knots(num_interior, order))
    if basis.m < 1:
        raise ValueError("basis must retain at least one function; increase knots or order")
    return basis


def basis_for_m(m: int, order: int = 4) -> SplineBasis:
    """Basis with exactly ``m`` retained functions for the given order."""
    return make_basis(m - order + 1, order)


def eval_raw_basis(basis: SplineBasis, x) -> np.ndarray:
    """Evaluate all ``K + r`` raw B-splines at ``x`` by the Cox-de Boor recursion.

    Returns an array of shape ``x.shape + (K + r,)``. Inputs must lie in [0, 1].
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape
    xs = x.reshape(-1)
    if not np.all(np.isfinite(xs)):
        raise ValueError("basis inputs must be finite")
    if np.any(xs < 0.0) or np.any(xs > 1.0):
        raise ValueError("basis inputs must lie in [0, 1]; rescale first")

    r = basis.order
    t = basis.knots.full
    n_raw = basis.n_raw
    # knot span s with t[s] <= x < t[s+1]; x == 1 belongs to the last span
    span = np.searchsorted(t, xs, side="right") - 1
    span = np.clip(span, r - 1, n_raw - 1)

    N = np.zeros((xs.size, r))
    N[:, 0] = 1.0
    left = np.zeros((xs.size, r))
    right = np.zeros((xs.size, r))
    for j in range(1, r):
        left[:, j] = xs - t[span + 1 - j]
        right[:, j] = t[span + j] - xs
        saved = np.zeros(xs.size)
        for k in range(j):
            temp = N[:, k] / (right[:, k + 1] + left[:, j - k])
            N[:, k] = saved + right[:, k + 1] * temp
            saved = left[:, j - k] * temp
        N[:, j] = saved

    out = np.zeros((xs.size, n_raw))
    rows = np.arange(xs.size)[:, None]
    cols = span[:, None] - (r - 1) + np.arange(r)[None, :]
    out[rows, cols] = N
    return out.reshape(shape + (n_raw,))


def _quadrature(basis: SplineBasis):
    # r Gauss-Legendre nodes per interval integrate degree 2r - 2 products exactly
    nodes, wts = np.polynomial.legendre.leggauss(basis.order)
    bp = basis.knots.breakpoints
    a, b = bp[:-1, None], bp[1:, None]
    x = (0.5 * (b - a) * nodes[None, :] + 0.5 * (a + b)).ravel()
    w = (0.5 * (b - a) * wts[None, :]).ravel()
    return x, w


def raw_gram(basis: SplineBasis) -> np.ndarray:
    """Gram matrix of all ``K + r`` raw functions, ``int_0^1 b_k b_l``."""
    x, w = _quadrature(basis)
    B = eval_raw_basis(basis, x)
    G = B.T @ (w[:, None] * B)
    return 0.5 * (G + G.T)


def raw_integrals(basis: SplineBasis) -> np.ndarray:
    x, w = _quadrature(basis)
    return eval_raw_basis(basis, x).T @ w


def gram_matrices(basis: SplineBasis, column_means=None, p: int = 1) -> np.ndarray:
    """Penalty Gram matrices ``D_j``, one per covariate, shape ``(p, m, m)``.

    Without ``column_means`` every ``D_j`` is the Gram of the retained raw
    functions. With ``column_means`` of shape ``(p, m)`` the integrand uses the
    centered functions ``b_k - c_jk``, which is a rank-one correction of the
    raw Gram.
    """
    m = basis.m
    G = raw_gram(basis)[:m, :m]
    if column_means is None:
        return np.repeat(G[None, :, :], p, axis=0)
    c = np.atleast_2d(np.asarray(column_means, dtype=float))
    e = raw_integrals(basis)[:m]
    D = (
        G[None, :, :]
        - e[None, :, None] * c[:, None, :]
        - c[:, :, None] * e[None, None, :]
        + c[:, :, None] * c[:, None, :]
    )
    return 0.5 * (D + np.swapaxes(D, 1, 2))


@dataclass(frozen=True)
class UnitScaler:
    """Per-column min-max map onto [0, 1]; reused unchanged at predict time."""

    lower: np.ndarray
    upper: np.ndarray

    def transform(self, X_raw, clamp: bool = True):
        """Return ``(X, n_clamped)``; out-of-range entries are clamped when ``clamp``."""
        X_raw = np.asarray(X_raw, dtype=float)
        if X_raw.ndim != 2 or X_raw.shape[1] != self.lower.size:
            raise ValueError(f"expected {self.lower.size} covariate columns")
        X = (X_raw - self.lower) / (self.upper - self.lower)
        outside = (X < 0.0) | (X > 1.0)
        n_clamped = int(outside.sum())
        if clamp:
            X = np.clip(X, 0.0, 1.0)
        return X, n_clamped

    def inverse(self, X) -> np.ndarray:
        return self.lower + np.asarray(X, dtype=float) * (self.upper - self.lower)


def rescale_to_unit(X_raw):
    """Affine min-max rescale of each column; constant columns are rejected."""
    X_raw = np.asarray(X_raw, dtype=float)
    if X_raw.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if not np.all(np.isfinite(X_raw)):
        raise ValueError("X contains non-finite values")
    lo = X_raw.min(axis=0)
    hi = X_raw.max(axis=0)
    const = np.flatnonzero(hi <= lo)
    if const.size:
        raise ValueError(f"constant covariate column(s): {const.tolist()}")
    scaler = UnitScaler(lower=lo, upper=hi)
    X, _ = scaler.transform(X_raw)
    return X, scaler


@dataclass(frozen=True)
class CenteredDesign:
    """Centered spline design ``Z = [1, B_1(X_1), ..., B_p(X_p)]``.

    ``gram[j]`` is ``D_j``; ``chol[j]`` its lower Cholesky factor ``L_j``.
    ``Z_white[:, j, :]`` holds ``Z_j L_j^{-T}``, the block in coordinates where
    the penalty norm ``||beta_j||_{D_j}`` is Euclidean.
    """

    Z: np.ndarray
    basis: SplineBasis
    column_means: np.ndarray
    gram: np.ndarray
    chol: np.ndarray = field(repr=False)
    Z_white: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def p(self) -> int:
        return self.column_means.shape[0]

    @property
    def m(self) -> int:
        return self.basis.m

    def group_slice(self, j: int) -> slice:
        m = self.m
        return slice(1 + j * m, 1 + (j + 1) * m)

    @property
    def group_index(self) -> dict:
        return {j: self.group_slice(j) for j in range(self.p)}

    def blocks(self) -> np.ndarray:
        """Non-intercept columns as an ``(n, p, m)`` view."""
        return self.Z[:, 1:].reshape(self.n, self.p, self.m)


def centered_rows(basis: SplineBasis, X, column_means) -> np.ndarray:
    """Design rows for new unit-interval covariates, centered with stored means."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    raw = eval_raw_basis(basis, X)[..., : basis.m]
    B = raw - np.asarray(column_means)[None, :, :]
    return np.hstack([np.ones((X.shape[0], 1)), B.reshape(X.shape[0], -1)])


def build_design(X, basis: SplineBasis, column_means=None) -> CenteredDesign:
    """Centered design for covariates already on [0, 1].

    Columns are centered by their sample means unless ``column_means`` (for
    example those stored with a fitted model) is given.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    n, p = X.shape
    m = basis.m
    if n < m + 1:
        raise ValueError(f"need at least m + 1 = {m + 1} samples, got {n}")
    raw = eval_raw_basis(basis, X)[..., :m]  # (n, p, m)
    if column_means is None:
        means = raw.mean(axis=0)
    else:
        means = np.array(column_means, dtype=float).reshape(p, m)
    B = raw - means[None, :, :]
    Z = np.hstack([np.ones((n, 1)), B.reshape(n, p * m)])

    gram = gram_matrices(basis, means, p)
    chol = np.empty_like(gram)
    Z_white = np.empty_like(B)
    for j in range(p):
        L = cholesky(gram[j], lower=True)
        chol[j] = L
        Z_white[:, j, :] = solve_triangular(L, B[:, j, :].T, lower=True).T
    for arr in (Z, means, gram, chol, Z_white):
        arr.setflags(write=False)
    return CenteredDesign(Z=Z, basis=basis, column_means=means, gram=gram, chol=chol, Z_white=Z_white)
