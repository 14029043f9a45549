"""Tuning: ``lambda`` by an information criterion, ``nu`` by the Hyvarinen score."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .basis import CenteredDesign
from .errors import SelectionError
from .loss import residual_weights, residuals
from .parallel import pmap
from .penalty import PenaltySpec
from .solver import FitConfig, ModelFit, fit_null, fit_penalized, fit_unpenalized, lambda_max

log = logging.getLogger(__name__)

IC_KINDS = ("aic", "bic", "ebic", "cp")
DEFAULT_NUS = (0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
HSCORE_FORMS = ("definition", "closed_form")
HSCORE_SCALES = ("reference", "fit")


def ic_value(kind: str, n: int, p: int, sigma2: float, df: float, sigma_u: float | None = None) -> float:
    """AIC, BIC, EBIC or Cp from ``sigma^2`` and the degrees of freedom.

    ``n log(n sigma^2)`` plus ``2 df``, ``df log n`` or ``df (log n + log p)``;
    Cp is ``n sigma^2 / sigma_u^2 - n + 2 df``.
    """
    kind = kind.lower()
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    if kind == "cp":
        if sigma_u is None or not sigma_u > 0:
            raise ValueError("Cp needs a positive reference scale sigma_u")
        return n * sigma2 / sigma_u**2 - n + 2.0 * df
    fit_term = n * math.log(n * sigma2)
    if kind == "aic":
        return fit_term + 2.0 * df
    if kind == "bic":
        return fit_term + df * math.log(n)
    if kind == "ebic":
        return fit_term + df * (math.log(n) + math.log(p))
    raise ValueError(f"unknown information criterion {kind!r}; choose from {IC_KINDS}")


def information_criterion(fit: ModelFit, kind: str, n: int, p: int, sigma_u: float | None = None) -> float:
    return ic_value(kind, n, p, fit.sigma2, fit.df, sigma_u)


def hscore_from_residuals(r, nu: float, sigma2: float, form: str = "definition") -> float:
    """Hyvarinen score of the DPD pseudo-density ``exp(-V_i)``.

    ``"definition"`` is the sample mean of ``-2 d^2V/dy^2 + (dV/dy)^2``,

        (1 + nu) / sigma^4 * f^nu * (2 nu r^2 - 2 sigma^2 + (1 + nu) r^2 f^nu),

    which reduces to the Gaussian score ``(r^2 - 2 sigma^2) / sigma^4`` at
    ``nu = 0``. ``"closed_form"`` is the variant

        (1 + nu) / sigma^4 * f^nu * (nu r^2 - sigma^2 + (1 + nu) r^2 f^nu)

    that halves the second-derivative part.
    """
    r = np.asarray(r, dtype=float)
    w = residual_weights(r, nu, sigma2)
    r2 = r * r
    if form == "definition":
        inner = 2.0 * nu * r2 - 2.0 * sigma2 + (1.0 + nu) * r2 * w
    elif form == "closed_form":
        inner = nu * r2 - sigma2 + (1.0 + nu) * r2 * w
    else:
        raise ValueError(f"unknown H-score form {form!r}; choose from {HSCORE_FORMS}")
    return float((1.0 + nu) / sigma2**2 * np.mean(inner * w))


def hscore(fit: ModelFit, design: CenteredDesign, y, form: str = "definition", sigma2: float | None = None) -> float:
    """H-score of a fit; ``sigma2`` replaces the fitted scale when given."""
    s2 = fit.sigma2 if sigma2 is None else sigma2
    return hscore_from_residuals(residuals(fit.coef, design, y), fit.nu, s2, form)


@dataclass(frozen=True)
class SelectionGrid:
    """Tuning grids. ``lambdas=None`` builds a per-``nu`` log grid from ``lambda_max``."""

    lambdas: tuple | None = None
    nus: tuple = DEFAULT_NUS
    ic_kind: str = "ebic"
    n_lambda: int = 30
    lambda_ratio: float = 1e-3

    def __post_init__(self):
        if self.lambdas is not None:
            lam = tuple(sorted((float(v) for v in self.lambdas), reverse=True))
            if not lam or lam[-1] < 0:
                raise ValueError("lambda grid must be non-empty and >= 0")
            object.__setattr__(self, "lambdas", lam)
        nus = tuple(sorted(float(v) for v in self.nus))
        if not nus or nus[0] < 0:
            raise ValueError("nu grid must be non-empty and >= 0")
        object.__setattr__(self, "nus", nus)
        if self.ic_kind.lower() not in IC_KINDS:
            raise ValueError(f"unknown information criterion {self.ic_kind!r}")
        object.__setattr__(self, "ic_kind", self.ic_kind.lower())
        if self.n_lambda < 1 or not 0 < self.lambda_ratio < 1:
            raise ValueError("need n_lambda >= 1 and 0 < lambda_ratio < 1")


@dataclass
class Cell:
    """One (lambda, nu) grid point."""

    nu: float
    lam: float
    df: int
    sigma2: float
    ic: float
    hscore: float
    active_set: tuple
    converged: bool
    degenerate: bool
    iterations: int
    note: str = ""

    @property
    def usable(self) -> bool:
        return self.converged and not self.degenerate


@dataclass
class LambdaPath:
    nu: float
    lambdas: np.ndarray
    fits: list
    sigma_u: float | None = None


@dataclass
class SelectionReport:
    ic_kind: str
    hscore_form: str
    hscore_scale: str
    cells: list
    chosen_lambda_per_nu: dict
    nu_scores: dict
    chosen_nu: float
    final_fit: ModelFit
    sigma_u: dict = field(default_factory=dict)


def lambda_grid(design: CenteredDesign, y, nu: float, n_lambda: int = 30, ratio: float = 1e-3, config=None):
    """Descending log grid from ``lambda_max`` at the intercept-only fit; returns ``(grid, null_fit)``."""
    null = fit_null(design, y, nu, config)
    lmax = lambda_max(design, y, null)
    if not lmax > 0:
        return np.array([0.0]), null
    return lmax * np.logspace(0.0, np.log10(ratio), n_lambda), null


def fit_path(
    design: CenteredDesign,
    y,
    nu: float,
    penalty: PenaltySpec,
    lambdas=None,
    config: FitConfig | None = None,
    n_lambda: int = 30,
    ratio: float = 1e-3,
) -> LambdaPath:
    """Fits along a descending ``lambda`` grid with warm starts.

    Each cell starts from the most recent fit that did not collapse; the
    first cell starts from the intercept-only fit.
    """
    config = config or FitConfig()
    if lambdas is None:
        lambdas, start = lambda_grid(design, y, nu, n_lambda, ratio, config)
    else:
        lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
        start = fit_null(design, y, nu, config)
    fits = []
    for lam in lambdas:
        fit = fit_penalized(design, y, nu, penalty.with_lam(float(lam)), config, warm_start=start)
        fits.append(fit)
        if not fit.degenerate:
            start = fit
    return LambdaPath(nu=float(nu), lambdas=np.asarray(lambdas), fits=fits)


def robust_sigma_u(design: CenteredDesign, y, nu: float, config: FitConfig | None = None) -> float:
    """Full-model scale for Cp, corrected for the fitted degrees of freedom.

    ``sqrt(sigma_hat^2 n / (n - k))`` from the unpenalized MDPDE with ``k``
    columns; at ``nu = 0`` this is the classical residual standard error. If
    the full model collapses at ``nu`` the fit is retried at ``nu / 2``,
    ``nu / 4``, ... and finally at ``nu = 0``.
    """
    n, k = design.Z.shape
    if n <= k:
        raise SelectionError(f"full model with {k} columns is not identifiable from n = {n} rows")
    v = float(nu)
    while True:
        fit = fit_unpenalized(design, y, v, config)
        if fit.usable or v == 0.0:
            break
        log.info("full-model fit at nu=%g collapsed; retrying with a smaller nu", v)
        v = v / 2.0 if v > 0.01 else 0.0
    return math.sqrt(fit.sigma2 * n / (n - k))


def _make_cells(path: LambdaPath, design, y, kind, sigma_u, form, h_sigma=None) -> list:
    n, p = design.n, design.p
    cells = []
    for lam, fit in zip(path.lambdas, path.fits):
        note = []
        if fit.degenerate:
            note.append("scale collapsed")
        elif not fit.converged:
            note.append("not converged")
        ic = information_criterion(fit, kind, n, p, sigma_u)
        hs = hscore(fit, design, y, form, None if h_sigma is None else h_sigma**2)
        cells.append(
            Cell(
                nu=path.nu,
                lam=float(lam),
                df=fit.df,
                sigma2=fit.sigma2,
                ic=ic,
                hscore=hs,
                active_set=fit.active_set,
                converged=fit.converged,
                degenerate=fit.degenerate,
                iterations=fit.iterations,
                note="; ".join(note),
            )
        )
    return cells


def choose_index(cells) -> int:
    """Index of the usable cell with the smallest IC; ties go to the earlier (larger) lambda."""
    ics = np.array([c.ic if c.usable else np.inf for c in cells])
    if not np.any(np.isfinite(ics)):
        raise SelectionError("no usable cell on the lambda path", [c.note for c in cells])
    return int(np.argmin(ics))


def select_lambda(
    design: CenteredDesign,
    y,
    nu: float,
    penalty_kind: str = "scad",
    grid: SelectionGrid | None = None,
    config: FitConfig | None = None,
    sigma_u: float | None = None,
    shape: float | None = None,
    hscore_form: str = "definition",
):
    """Returns ``(lambda_star, fit, cells)`` minimizing the grid's criterion along the path."""
    grid = grid or SelectionGrid()
    penalty = PenaltySpec(penalty_kind, 0.0, shape)
    path = fit_path(design, y, nu, penalty, grid.lambdas, config, grid.n_lambda, grid.lambda_ratio)
    if grid.ic_kind == "cp" and sigma_u is None:
        sigma_u = robust_sigma_u(design, y, nu, config)
    cells = _make_cells(path, design, y, grid.ic_kind, sigma_u, hscore_form)
    i = choose_index(cells)
    return cells[i].lam, path.fits[i], cells


def _nu_job(nu, design, y, penalty, grid, config, kinds, form, scale):
    """Path plus per-criterion choice at one ``nu``; module level so it pickles."""
    path = fit_path(design, y, nu, penalty, grid.lambdas, config, grid.n_lambda, grid.lambda_ratio)
    need_u = "cp" in kinds or scale == "reference"
    sigma_u = robust_sigma_u(design, y, nu, config) if need_u else None
    h_sigma = sigma_u if scale == "reference" else None
    out = {}
    for kind in kinds:
        cells = _make_cells(path, design, y, kind, sigma_u, form, h_sigma)
        try:
            i = choose_index(cells)
            out[kind] = (cells, i, path.fits[i])
        except SelectionError:
            out[kind] = (cells, None, None)
    return nu, sigma_u, out


def select_nu_multi(
    design: CenteredDesign,
    y,
    kinds=("ebic",),
    penalty_kind: str = "scad",
    grid: SelectionGrid | None = None,
    config: FitConfig | None = None,
    hscore_form: str = "definition",
    shape: float | None = None,
    threads: int = 1,
    hscore_scale: str = "reference",
) -> dict:
    """One :class:`SelectionReport` per criterion, sharing a single path per ``nu``.

    With ``hscore_scale="reference"`` each ``nu`` is scored at the robust
    full-model scale :func:`robust_sigma_u` instead of the selected fit's own
    ``sigma_hat``. Over-parameterized fits at large ``nu`` can shrink
    ``sigma_hat`` well below the noise level, and the score, which scales like
    ``1 / sigma^2``, would then favour them regardless of fit quality.
    """
    grid = grid or SelectionGrid()
    kinds = tuple(k.lower() for k in kinds)
    if hscore_scale not in HSCORE_SCALES:
        raise ValueError(f"hscore_scale must be one of {HSCORE_SCALES}")
    penalty = PenaltySpec(penalty_kind, 0.0, shape)
    job = partial(
        _nu_job,
        design=design,
        y=y,
        penalty=penalty,
        grid=grid,
        config=config,
        kinds=kinds,
        form=hscore_form,
        scale=hscore_scale,
    )
    results = pmap(job, grid.nus, threads)
    reports = {}
    for kind in kinds:
        cells, chosen_lam, scores, fits, sig = [], {}, {}, {}, {}
        for nu, sigma_u, out in results:
            c, i, fit = out[kind]
            cells.extend(c)
            if sigma_u is not None:
                sig[nu] = sigma_u
            if i is not None:
                chosen_lam[nu] = c[i].lam
                scores[nu] = c[i].hscore
                fits[nu] = fit
        finite = {nu: s for nu, s in scores.items() if np.isfinite(s)}
        if not finite:
            raise SelectionError("every nu failed", [c.note for c in cells])
        best = min(finite, key=lambda v: (finite[v], v))
        reports[kind] = SelectionReport(
            ic_kind=kind,
            hscore_form=hscore_form,
            hscore_scale=hscore_scale,
            cells=cells,
            chosen_lambda_per_nu=chosen_lam,
            nu_scores=scores,
            chosen_nu=best,
            final_fit=fits[best],
            sigma_u=sig,
        )
    return reports


def select_nu(
    design: CenteredDesign,
    y,
    penalty_kind: str = "scad",
    grid: SelectionGrid | None = None,
    config: FitConfig | None = None,
    hscore_form: str = "definition",
    shape: float | None = None,
    threads: int = 1,
    hscore_scale: str = "reference",
) -> SelectionReport:
    """Pick ``lambda`` per ``nu`` by the grid's criterion, then ``nu`` by the smallest H-score."""
    grid = grid or SelectionGrid()
    reports = select_nu_multi(
        design, y, (grid.ic_kind,), penalty_kind, grid, config, hscore_form, shape, threads, hscore_scale
    )
    return reports[grid.ic_kind]
