"""Synthetic sparse additive scenarios, replicated experiments and metrics.

A replicate draws Gaussian-copula covariates on (0, 1), places eight signed
component functions at random slots, adds errors from the scenario's law and
fits every requested estimator. Test data are drawn from the uncontaminated
law for Gaussian scenarios and from the training law for Cauchy and
chi-squared errors, where the prediction error has no variance normalizer.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from scipy.special import ndtr

from .basis import build_design, make_basis
from .errors import NumericalError
from .parallel import pmap
from .penalty import PenaltySpec
from .selection import DEFAULT_NUS, SelectionGrid, select_lambda, select_nu_multi
from .solver import FitConfig, fit_unpenalized, predict

ERROR_KINDS = ("gaussian", "contaminated", "cauchy", "chisq1")
ESTIMATORS = ("dpd-aic", "dpd-bic", "dpd-ebic", "dpd-cp", "ls", "glasso", "oracle", "null")
METRICS = (
    "rpe",
    "mpe_full",
    "mpe_trimmed",
    "rmpe",
    "mad",
    "mse_sigma",
    "sensitivity",
    "specificity",
    "dim_reduction",
)
FUNCTION_KINDS = ("sin", "sin", "cos", "cos", "exp", "exp", "linear", "linear")
CAUCHY_BOUND = 1e6


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class Scenario:
    """Simulation design.

    ``contam_frac`` is the Bernoulli rate of the contamination mask and
    ``contam_shift`` the mean of the N(shift, sigma^2) replacement draws; both
    are ignored unless ``error_kind == "contaminated"``.
    """

    n: int = 250
    p: int = 15
    q: int = 8
    rho: float = 0.5
    error_kind: str = "gaussian"
    sigma: float = 1.0
    contam_frac: float = 0.0
    contam_shift: float = 8.0
    n_test: int = 1000
    n_replicates: int = 100
    trim_fraction: float = 0.05
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.error_kind not in ERROR_KINDS:
            raise ValueError(f"error_kind must be one of {ERROR_KINDS}, got {self.error_kind!r}")
        for attr in ("n", "p", "q", "n_test", "n_replicates"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if self.q != len(FUNCTION_KINDS):
            raise ValueError(f"the function library has exactly {len(FUNCTION_KINDS)} components; q must be 8")
        if self.q > self.p:
            raise ValueError("q must not exceed p")
        if not 0.0 <= self.contam_frac < 0.5:
            raise ValueError("contamination fraction must lie in [0, 0.5)")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError("trim fraction must lie in [0, 0.5)")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if not (np.isfinite(self.sigma) and self.sigma >= 0.0):
            raise ValueError("sigma must be finite and >= 0")
        if self.sigma == 0.0 and self.error_kind != "gaussian":
            raise ValueError("sigma = 0 is only meaningful for Gaussian errors")

    @property
    def pure_test(self) -> bool:
        """Whether the test set follows the uncontaminated Gaussian law."""
        return self.error_kind in ("gaussian", "contaminated")

    @property
    def has_sigma(self) -> bool:
        return self.pure_test

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)


_INT_KEYS = ("n", "p", "q", "n_test", "n_replicates", "seed")
_FLOAT_KEYS = ("rho", "sigma", "contam_frac", "contam_shift", "trim_fraction")
_ALIASES = {
    "error": "error_kind",
    "replicates": "n_replicates",
    "omega": "trim_fraction",
    "contamination": "contam_frac",
    "shift": "contam_shift",
}


def scenario_from_mapping(values: dict, base: Scenario | None = None) -> Scenario:
    """Build a scenario from string or typed values, with a few key aliases."""
    kw = {}
    for key, raw in values.items():
        key = _ALIASES.get(key.strip().lower().replace("-", "_"), key.strip().lower().replace("-", "_"))
        if key in _INT_KEYS:
            kw[key] = int(raw)
        elif key in _FLOAT_KEYS:
            kw[key] = float(raw)
        elif key in ("error_kind", "name"):
            kw[key] = str(raw).strip().lower() if key == "error_kind" else str(raw).strip()
        else:
            raise ValueError(f"unknown scenario key {key!r}")
    return replace(base or Scenario(), **kw)


def load_scenario(path) -> Scenario:
    """Read the ``[scenario]`` section of an INI-style file."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("scenario"):
        raise ValueError(f"{path}: missing [scenario] section")
    return scenario_from_mapping(dict(parser["scenario"]))


def dump_scenario(scenario: Scenario) -> str:
    parser = configparser.ConfigParser()
    parser["scenario"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in vars(scenario).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def benchmark_scenario(contaminated: bool, **kw) -> Scenario:
    """n = 250, p = 15, sigma = 1; optionally 5% contamination from N(8, 1)."""
    base = Scenario(
        n=250,
        p=15,
        error_kind="contaminated" if contaminated else "gaussian",
        contam_frac=0.05 if contaminated else 0.0,
        contam_shift=8.0,
        name="additive-contaminated" if contaminated else "additive-pure",
    )
    return replace(base, **kw)


def heavy_tail_scenario(kind: str, **kw) -> Scenario:
    """Cauchy errors with p = 20, or chi-squared(1) errors with p = 15."""
    if kind not in ("cauchy", "chisq1"):
        raise ValueError("kind must be 'cauchy' or 'chisq1'")
    base = Scenario(n=250, p=20 if kind == "cauchy" else 15, error_kind=kind, name=f"heavy-{kind}")
    return replace(base, **kw)


# ---------------------------------------------------------------- data generation


@dataclass(frozen=True)
class TrueModel:
    """Eight signed components ``a_k g_k(x_{j_k})`` with ``g`` from the fixed library.

    ``offsets`` are subtracted from each component so that it has mean zero
    over the training covariates; the same offsets apply to test draws.
    """

    active: np.ndarray
    kinds: tuple
    coefs: np.ndarray
    sigma_true: float
    p: int
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(len(FUNCTION_KINDS)))

    def __post_init__(self):
        if len(set(int(j) for j in self.active)) != len(self.active):
            raise ValueError("active slots must be distinct")
        if np.any(np.abs(self.coefs) < 1.0) or np.any(np.abs(self.coefs) > 2.0):
            raise ValueError("coefficients must satisfy 1 <= |a| <= 2")

    @property
    def active_set(self) -> tuple:
        return tuple(sorted(int(j) for j in self.active))

    def raw_components(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], len(self.kinds)))
        for k, (j, kind, a) in enumerate(zip(self.active, self.kinds, self.coefs)):
            out[:, k] = a * _g(kind, X[:, j])
        return out

    def components(self, X) -> np.ndarray:
        return self.raw_components(X) - self.offsets

    def signal(self, X) -> np.ndarray:
        return self.components(X).sum(axis=1)

    def centered_on(self, X) -> "TrueModel":
        return replace(self, offsets=self.raw_components(X).mean(axis=0))


def _g(kind: str, x):
    if kind == "sin":
        return np.sin(2.0 * np.pi * x)
    if kind == "cos":
        return np.cos(2.0 * np.pi * x)
    if kind == "exp":
        return np.exp(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown function kind {kind!r}")


def copula_correlation(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(np.subtract.outer(idx, idx))


def gen_covariates(scenario: Scenario, rng, n: int | None = None, rho: float | None = None):
    """Gaussian-copula covariates: ``(Z, X)`` with ``Z ~ N_p(0, Sigma)`` and ``X = Phi(Z)``."""
    n = scenario.n if n is None else n
    rho = scenario.rho if rho is None else rho
    L = np.linalg.cholesky(copula_correlation(scenario.p, rho))
    Z = rng.standard_normal((n, scenario.p)) @ L.T
    return Z, ndtr(Z)


def gen_true_model(scenario: Scenario, rng) -> TrueModel:
    if scenario.p < len(FUNCTION_KINDS):
        raise ValueError(f"p must be at least {len(FUNCTION_KINDS)}")
    active = rng.permutation(scenario.p)[: len(FUNCTION_KINDS)]
    half = len(FUNCTION_KINDS) // 2
    coefs = np.concatenate([rng.uniform(1.0, 2.0, half), -rng.uniform(1.0, 2.0, half)])
    coefs = rng.permutation(coefs)
    return TrueModel(active=active, kinds=FUNCTION_KINDS, coefs=coefs, sigma_true=scenario.sigma, p=scenario.p)


def gen_errors(scenario: Scenario, n: int, rng, pure: bool = False):
    """Error draws and the contamination mask (all False unless contaminated).

    ``pure=True`` switches off the contamination mask; heavy-tailed laws are
    unaffected because they have no clean counterpart.
    """
    kind = scenario.error_kind
    mask = np.zeros(n, dtype=bool)
    if kind in ("gaussian", "contaminated"):
        eps = scenario.sigma * rng.standard_normal(n)
        if kind == "contaminated" and not pure:
            mask = rng.random(n) < scenario.contam_frac
            eps[mask] = scenario.contam_shift + scenario.sigma * rng.standard_normal(int(mask.sum()))
    elif kind == "cauchy":
        eps = np.clip(rng.standard_cauchy(n), -CAUCHY_BOUND, CAUCHY_BOUND)
    else:
        eps = rng.chisquare(1.0, n)
    return eps, mask


def gen_response(X, true_model: TrueModel, scenario: Scenario, rng, pure: bool = False):
    """``(y, mask)`` with ``y = sum_k g_k + eps``."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != true_model.p:
        raise ValueError("covariate matrix does not match the true model's p")
    eps, mask = gen_errors(scenario, X.shape[0], rng, pure=pure)
    return true_model.signal(X) + eps, mask


# ---------------------------------------------------------------- metrics


def _pair(yhat, y):
    yhat = np.asarray(yhat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if yhat.shape != y.shape:
        raise ValueError(f"length mismatch: {yhat.size} predictions for {y.size} responses")
    return yhat, y


def compute_rpe(yhat, y_test, sigma_true2: float) -> float:
    """Relative prediction error ``mean((yhat - y)^2) / sigma^2``."""
    yhat, y = _pair(yhat, y_test)
    if not sigma_true2 > 0:
        raise ValueError("sigma_true2 must be > 0")
    return float(np.mean((yhat - y) ** 2) / sigma_true2)


def compute_trimmed_mpe(yhat, y_test, omega: float) -> float:
    """Mean squared prediction error after dropping the ``ceil(omega R)`` largest absolute errors."""
    yhat, y = _pair(yhat, y_test)
    if not 0.0 <= omega < 0.5:
        raise ValueError("omega must lie in [0, 0.5)")
    sq = np.sort((yhat - y) ** 2)
    drop = math.ceil(omega * sq.size - 1e-12)
    return float(np.mean(sq[: sq.size - drop]))


def compute_rmpe_mad(yhat, y_test) -> tuple:
    """Root mean squared and mean absolute prediction error."""
    yhat, y = _pair(yhat, y_test)
    e = yhat - y
    return float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e)))


def compute_selection_metrics(active_set, true_active, p: int, q: int | None = None):
    """``(sensitivity, specificity, dim_reduction, specificity_undefined)``.

    Specificity is reported as 1 with the flag set when every component is
    truly active.
    """
    active = {int(j) for j in active_set}
    truth = {int(j) for j in true_active}
    q = len(truth) if q is None else q
    if q == 0:
        raise ValueError("sensitivity needs a non-empty true active set")
    sens = len(active & truth) / q
    if p == q:
        spec, flag = 1.0, True
    else:
        spec, flag = (p - q - len(active - truth)) / (p - q), False
    dim = 100.0 * (p - len(active)) / p
    return sens, spec, dim, flag


def compute_mse_sigma(sigma_hats, sigma_true: float) -> float:
    s = np.asarray(sigma_hats, dtype=float)
    return float(np.mean((s - sigma_true) ** 2))


# ---------------------------------------------------------------- experiment


@dataclass(frozen=True)
class ExperimentSettings:
    """Estimator settings shared by every replicate."""

    nus: tuple = DEFAULT_NUS
    n_lambda: int = 30
    lambda_ratio: float = 1e-3
    penalty_kind: str = "scad"
    hscore_form: str = "definition"
    hscore_scale: str = "reference"
    num_interior: int = 2
    order: int = 4
    glasso_ic: str = "bic"
    config: FitConfig = field(default_factory=FitConfig)

    def grid(self) -> SelectionGrid:
        return SelectionGrid(nus=tuple(self.nus), n_lambda=self.n_lambda, lambda_ratio=self.lambda_ratio)


@dataclass
class ReplicateResult:
    """Metrics of one estimator on one replicate; ``error`` is set when the fit failed."""

    estimator: str
    replicate: int
    metrics: dict
    nu: float = float("nan")
    lam: float = float("nan")
    sigma_hat: float = float("nan")
    active_set: tuple = ()
    error: str = ""


@dataclass
class MetricsReport:
    """Mean and SD of every metric per estimator, plus the raw replicate rows."""

    scenario: Scenario
    estimators: tuple
    mean: dict
    sd: dict
    n_ok: dict
    n_failed: dict
    snr: float
    records: list

    def metric(self, estimator: str, name: str) -> float:
        return self.mean[estimator][name]

    def chosen_nus(self, estimator: str) -> np.ndarray:
        return np.array([r.nu for r in self.records if r.estimator == estimator and not r.error])

    def to_csv(self) -> str:
        cols = ["scenario", "estimator", "n_ok", "n_failed"]
        for m in METRICS:
            cols += [f"{m}_mean", f"{m}_sd"]
        lines = [",".join(cols)]
        for est in self.estimators:
            row = [self.scenario.name, est, str(self.n_ok[est]), str(self.n_failed[est])]
            for m in METRICS:
                row += [format_float(self.mean[est][m]), format_float(self.sd[est][m])]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned text table, one mean row and one SD row per estimator."""
        names = [m for m in METRICS if any(np.isfinite(self.mean[e][m]) for e in self.estimators)]
        head = ["estimator", ""] + names
        rows = []
        for est in self.estimators:
            rows.append([est, "mean"] + [f"{self.mean[est][m]:.4f}" for m in names])
            rows.append(["", "sd"] + [f"{self.sd[est][m]:.4f}" for m in names])
        widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(str(c).rjust(w) if i > 1 else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out = [f"# {self.scenario.name}: n={self.scenario.n} p={self.scenario.p} error={self.scenario.error_kind} "
               f"replicates={self.scenario.n_replicates} snr={self.snr:.4f}", fmt(head)]
        out += [fmt(r) for r in rows]
        return "\n".join(out) + "\n"


def format_float(x: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return f"{float(x):.17g}"


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))


def _metrics(scenario: Scenario, yhat, y_test, sigma_hat, active, truth) -> dict:
    out = dict.fromkeys(METRICS, float("nan"))
    out["mpe_full"] = compute_trimmed_mpe(yhat, y_test, 0.0)
    out["mpe_trimmed"] = compute_trimmed_mpe(yhat, y_test, scenario.trim_fraction)
    out["rmpe"], out["mad"] = compute_rmpe_mad(yhat, y_test)
    if scenario.has_sigma and scenario.sigma > 0:
        out["rpe"] = compute_rpe(yhat, y_test, scenario.sigma**2)
        out["mse_sigma"] = (sigma_hat - scenario.sigma) ** 2
    sens, spec, dim, _ = compute_selection_metrics(active, truth, scenario.p, len(truth))
    out.update(sensitivity=sens, specificity=spec, dim_reduction=dim)
    return out


def simulate_replicate(scenario: Scenario, replicate: int):
    """Training data, pure or same-law test data and the centered true model."""
    rng = replicate_rng(scenario.seed, replicate)
    model = gen_true_model(scenario, rng)
    _, X = gen_covariates(scenario, rng)
    model = model.centered_on(X)
    y, mask = gen_response(X, model, scenario, rng)
    _, X_test = gen_covariates(scenario, rng, n=scenario.n_test)
    y_test, _ = gen_response(X_test, model, scenario, rng, pure=True)
    return model, X, y, mask, X_test, y_test


def run_replicate(replicate: int, scenario: Scenario, estimators: tuple, settings: ExperimentSettings) -> list:
    model, X, y, _, X_test, y_test = simulate_replicate(scenario, replicate)
    truth = model.active_set
    design = build_design(X, make_basis(settings.num_interior, settings.order))
    results = []

    def record(name, yhat, sigma_hat, active, **extra):
        m = _metrics(scenario, yhat, y_test, sigma_hat, active, truth)
        results.append(
            ReplicateResult(name, replicate, m, sigma_hat=float(sigma_hat), active_set=tuple(active), **extra)
        )

    def failed(name, exc):
        results.append(ReplicateResult(name, replicate, dict.fromkeys(METRICS, float("nan")), error=str(exc)))

    dpd = [e for e in estimators if e.startswith("dpd-")]
    if dpd:
        kinds = tuple(e[4:] for e in dpd)
        try:
            reports = select_nu_multi(
                design,
                y,
                kinds,
                penalty_kind=settings.penalty_kind,
                grid=settings.grid(),
                config=settings.config,
                hscore_form=settings.hscore_form,
                hscore_scale=settings.hscore_scale,
            )
        except NumericalError as exc:
            for e in dpd:
                failed(e, exc)
        else:
            for e, kind in zip(dpd, kinds):
                fit = reports[kind].final_fit
                yhat, _ = predict(fit, X_test)
                record(e, yhat, np.sqrt(fit.sigma2), fit.active_set, nu=fit.nu, lam=fit.lam)
    for e in estimators:
        if e.startswith("dpd-"):
            continue
        try:
            if e == "ls":
                fit = fit_unpenalized(design, y, 0.0, settings.config)
                yhat, _ = predict(fit, X_test)
                record(e, yhat, np.sqrt(fit.sigma2), fit.active_set, nu=0.0, lam=0.0)
            elif e == "glasso":
                lam, fit, _ = select_lambda(
                    design,
                    y,
                    0.0,
                    penalty_kind="glasso",
                    grid=replace(settings.grid(), ic_kind=settings.glasso_ic),
                    config=settings.config,
                )
                yhat, _ = predict(fit, X_test)
                record(e, yhat, np.sqrt(fit.sigma2), fit.active_set, nu=0.0, lam=lam)
            elif e == "oracle":
                # unpenalized least squares on the truly active covariates only
                cols = list(truth)
                fit = fit_unpenalized(build_design(X[:, cols], design.basis), y, 0.0, settings.config)
                yhat, _ = predict(fit, X_test[:, cols])
                record(e, yhat, np.sqrt(fit.sigma2), truth, nu=0.0, lam=0.0)
            elif e == "null":
                mu = float(np.mean(y))
                record(e, np.full(X_test.shape[0], mu), float(np.std(y)), ())
            else:
                raise ValueError(f"unknown estimator {e!r}")
        except NumericalError as exc:
            failed(e, exc)
    return results


def empirical_snr(scenario: Scenario, replicates: int = 20, n: int | None = None) -> float:
    """Mean of ``var(signal) / sigma^2`` over fresh draws (heavy tails: ``sigma = 1``)."""
    vals = []
    for r in range(replicates):
        rng = replicate_rng(scenario.seed, r)
        model = gen_true_model(scenario, rng)
        _, X = gen_covariates(scenario, rng, n=n)
        s2 = scenario.sigma**2 if scenario.has_sigma and scenario.sigma > 0 else 1.0
        vals.append(np.var(model.signal(X)) / s2)
    return float(np.mean(vals))


def run_experiment(
    scenario: Scenario,
    estimators=("dpd-bic", "ls", "oracle"),
    settings: ExperimentSettings | None = None,
    threads: int | None = 1,
) -> MetricsReport:
    """Fit every estimator on ``scenario.n_replicates`` replicates and aggregate.

    Replicate ``r`` draws from ``SeedSequence([seed, r])``, so results do not
    depend on ``threads``. Failed fits are excluded from that estimator's
    averages and counted in ``n_failed``.
    """
    estimators = tuple(e.lower() for e in estimators)
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}; choose from {ESTIMATORS}")
    settings = settings or ExperimentSettings()
    job = partial(run_replicate, scenario=scenario, estimators=estimators, settings=settings)
    records = [r for rep in pmap(job, range(scenario.n_replicates), threads) for r in rep]
    mean, sd, n_ok, n_failed = {}, {}, {}, {}
    for e in estimators:
        rows = [r for r in records if r.estimator == e]
        ok = [r for r in rows if not r.error]
        n_ok[e], n_failed[e] = len(ok), len(rows) - len(ok)
        mean[e], sd[e] = {}, {}
        for m in METRICS:
            vals = np.array([r.metrics[m] for r in ok], dtype=float)
            if vals.size == 0 or not np.all(np.isfinite(vals)):
                mean[e][m] = sd[e][m] = float("nan")
                continue
            mean[e][m] = float(np.mean(vals))
            sd[e][m] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    return MetricsReport(
        scenario=scenario,
        estimators=estimators,
        mean=mean,
        sd=sd,
        n_ok=n_ok,
        n_failed=n_failed,
        snr=empirical_snr(scenario),
        records=records,
    )
