import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dpdam.basis import basis_for_m, build_design, make_basis
from dpdam.errors import DescentError
from dpdam.loss import Coefficients, DpdParams, loss_from_residuals, objective, sigma2_estimating_equation
from dpdam.penalty import PenaltySpec, penalty_derivative
from dpdam.solver import (
    FitConfig,
    fit_null,
    fit_penalized,
    fit_unpenalized,
    fitted_values,
    lambda_max,
    predict,
    standardize_group,
    stationarity,
)


def additive_data(seed, n=120, p=4, m=5, noise=0.5, active=(0, 1)):
    rng = np.random.default_rng(seed)
    X = rng.random((n, p))
    f = np.zeros(n)
    shapes = [lambda x: np.sin(2 * np.pi * x), lambda x: 2 * x - 1, lambda x: np.cos(2 * np.pi * x), np.exp]
    for k, j in enumerate(active):
        f += 1.5 * shapes[k % 4](X[:, j])
    y = f + noise * rng.standard_normal(n)
    return X, build_design(X, basis_for_m(m)), y


def tiny_instance(seed):
    """n = 40, p = 3, m = 3 with one active component and mild noise."""
    return additive_data(seed, n=40, p=3, m=3, noise=0.4, active=(0,))


class TestUnpenalized:
    @pytest.mark.parametrize("seed", range(5))
    def test_nu_zero_is_least_squares(self, seed):
        _, design, y = additive_data(seed)
        fit = fit_unpenalized(design, y, 0.0)
        b, *_ = np.linalg.lstsq(design.Z, y, rcond=None)
        assert_allclose(fit.coef.as_vector(), b, atol=1e-8)
        r = y - design.Z @ b
        assert fit.sigma2 == pytest.approx(np.mean(r * r), rel=1e-10)

    @pytest.mark.parametrize("nu", [0.0, 0.3, 0.7])
    def test_noiseless_recovery(self, nu):
        _, design, _ = additive_data(0, n=80, p=2)
        beta = np.random.default_rng(1).normal(size=design.Z.shape[1])
        y = design.Z @ beta
        fit = fit_unpenalized(design, y, nu)
        assert_allclose(fit.coef.as_vector(), beta, atol=1e-6)
        assert fit.degenerate
        assert not fit.usable
        assert fit.sigma2 <= 1e-6 * np.var(y)

    def test_scale_solves_normal_equation(self):
        _, design, y = additive_data(3, n=200, p=2)
        fit = fit_unpenalized(design, y, 0.3, FitConfig(tol_beta=1e-10, tol_sigma2=1e-12, max_outer_iters=2000))
        assert fit.converged
        r = y - fitted_values(fit, design)
        assert abs(sigma2_estimating_equation(r, 0.3, fit.sigma2)) / design.n <= 1e-6

    def test_gross_outlier_influence(self):
        X, design, y = additive_data(4, n=60, p=2, noise=0.3)
        y_bad = y.copy()
        y_bad[7] += 50.0
        shift = {}
        for nu in (0.0, 0.5):
            clean = fit_unpenalized(design, y, nu).coef.as_vector()
            dirty_fit = fit_unpenalized(design, y_bad, nu)
            shift[nu] = np.linalg.norm(dirty_fit.coef.as_vector() - clean)
            if nu == 0.5:
                r = y_bad - fitted_values(dirty_fit, design)
                assert r[7] == pytest.approx(50.0, abs=2.0)
        assert shift[0.5] * 10 <= shift[0.0]

    def test_objective_trace_non_increasing(self):
        _, design, y = additive_data(5, n=150, p=3)
        fit = fit_unpenalized(design, y, 0.5)
        assert np.all(np.diff(fit.objective_trace) <= 1e-8 * np.maximum(1, np.abs(fit.objective_trace[:-1])))


class TestStandardizeGroup:
    def test_identity_for_orthonormal(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(30, 4)))
        R, R_inv = standardize_group(Q, np.ones(30))
        assert_allclose(np.abs(R), np.eye(4), atol=1e-12)

    def test_weighted_gram_is_identity(self):
        rng = np.random.default_rng(1)
        Zj, w = rng.normal(size=(50, 5)), rng.uniform(0.1, 1.0, 50)
        R, R_inv = standardize_group(Zj, w)
        T = Zj @ R_inv
        assert_allclose(T.T @ (w[:, None] * T), np.eye(5), atol=1e-10)
        assert_allclose(R @ R_inv, np.eye(5), atol=1e-12)


class TestPenalized:
    def test_huge_lambda_gives_null_model(self):
        _, design, y = additive_data(6)
        null = fit_null(design, y, 0.3)
        assert fit_penalized(design, y, 0.3, PenaltySpec("scad", 1e9)).active_set == ()
        fit = fit_penalized(design, y, 0.3, PenaltySpec("scad", 1e9), warm_start=null)
        assert_array_equal(fit.coef.beta, 0.0)
        assert fit.coef.mu == pytest.approx(null.coef.mu, abs=1e-5)
        assert fit.sigma2 == pytest.approx(null.sigma2, rel=1e-5)

    def test_lambda_max_zeroes_everything(self):
        _, design, y = additive_data(7)
        null = fit_null(design, y, 0.25)
        lam = lambda_max(design, y, null)
        assert fit_penalized(design, y, 0.25, PenaltySpec("scad", lam * 1.001), warm_start=null).active_set == ()
        assert fit_penalized(design, y, 0.25, PenaltySpec("scad", lam * 0.7), warm_start=null).active_set != ()

    @pytest.mark.parametrize("nu", [0.0, 0.25])
    def test_zero_lambda_matches_unpenalized(self, nu):
        _, design, y = additive_data(8, n=150, p=3)
        config = FitConfig(tol_beta=1e-10, tol_sigma2=1e-12, max_outer_iters=5000)
        pen = fit_penalized(design, y, nu, PenaltySpec("scad", 0.0), config)
        unpen = fit_unpenalized(design, y, nu, config)
        assert_allclose(pen.coef.as_vector(), unpen.coef.as_vector(), atol=1e-6)
        assert pen.sigma2 == pytest.approx(unpen.sigma2, rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_local_minimum_certificate(self, seed):
        _, design, y = tiny_instance(seed)
        pen = PenaltySpec("scad", 0.2)
        fit = fit_penalized(design, y, 0.25, pen, FitConfig(tol_beta=1e-10, tol_sigma2=1e-12, max_outer_iters=5000))
        assert fit.converged
        params = DpdParams(0.25, fit.sigma2)
        v0 = fit.coef.as_vector()
        best = objective(fit.coef, params, design, y, pen)
        p, m = design.p, design.m
        for k in range(v0.size):
            for h in (-0.05, -0.025, 0.025, 0.05):
                v = v0.copy()
                v[k] += h
                assert best <= objective(Coefficients.from_vector(v, p, m), params, design, y, pen) + 1e-8

    @pytest.mark.parametrize("kind", ["scad", "mcp", "glasso"])
    def test_stationarity(self, kind):
        _, design, y = additive_data(9, n=200, p=5)
        config = FitConfig(tol_beta=1e-9, tol_sigma2=1e-12, max_outer_iters=5000)
        fit = fit_penalized(design, y, 0.2, PenaltySpec(kind, 0.08), config)
        assert fit.converged
        st = stationarity(fit, design, y)
        tol = 10 * 1e-6
        assert st["intercept"] <= tol
        assert all(v <= tol for v in st["active"].values())
        assert all(v <= tol for v in st["inactive"].values())
        assert set(st["active"]) == set(fit.active_set)

    def test_descent_is_checked_on_every_pass(self):
        rng = np.random.default_rng(10)
        for seed in range(10):
            _, design, y = additive_data(seed, n=100, p=4)
            for kind in ("scad", "mcp", "glasso"):
                try:
                    fit_penalized(design, y, rng.choice([0.0, 0.1, 0.5]), PenaltySpec(kind, rng.uniform(0.02, 0.3)))
                except DescentError as exc:  # pragma: no cover - the assertion below reports it
                    pytest.fail(f"descent violated: {exc}")

    def test_warm_and_cold_starts_agree(self):
        _, design, y = additive_data(11, n=200, p=4, noise=0.3)
        pen = PenaltySpec("scad", 0.1)
        config = FitConfig(tol_beta=1e-9, tol_sigma2=1e-12, max_outer_iters=5000)
        cold = fit_penalized(design, y, 0.2, pen, config)
        warm = fit_penalized(design, y, 0.2, pen, config, warm_start=fit_null(design, y, 0.2))
        assert cold.objective == pytest.approx(warm.objective, abs=1e-4)

    def test_permutation_equivariance(self):
        X, design, y = additive_data(12, n=150, p=4)
        perm = np.array([2, 0, 3, 1])
        design_p = build_design(X[:, perm], design.basis)
        pen = PenaltySpec("scad", 0.08)
        # coordinate order differs after permuting, so converge far below 1e-10
        config = FitConfig(tol_beta=1e-13, tol_sigma2=1e-14, max_outer_iters=20000)
        a = fit_penalized(design, y, 0.2, pen, config)
        b = fit_penalized(design_p, y, 0.2, pen, config)
        assert a.converged and b.converged
        assert_allclose(b.coef.beta, a.coef.beta[perm], atol=1e-10)
        assert b.coef.mu == pytest.approx(a.coef.mu, abs=1e-10)

    def test_robustness_ordering(self):
        X, design, y = additive_data(13, n=150, p=3, noise=1.0)
        y8, y80 = y.copy(), y.copy()
        y8[3] += 8.0
        y80[3] += 80.0
        pen = PenaltySpec("scad", 0.05)
        moved = {}
        for nu in (0.0, 0.5):
            a = fit_penalized(design, y8, nu, pen).coef.as_vector()
            b = fit_penalized(design, y80, nu, pen).coef.as_vector()
            moved[nu] = np.max(np.abs(a - b))
        assert moved[0.5] < moved[0.0]

    def test_fixed_intercept_mode_runs(self):
        _, design, y = additive_data(14)
        fit = fit_penalized(design, y, 0.2, PenaltySpec("scad", 0.1), FitConfig(mu_mode="fixed"))
        assert np.isfinite(fit.objective)

    @pytest.mark.parametrize("field,value", [("damping", 0.0), ("sigma2_form", "x"), ("mu_mode", "x"), ("tol_beta", -1)])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            FitConfig(**{field: value})


class TestPredict:
    @pytest.fixture
    def fitted(self):
        X, design, y = additive_data(15, p=4)
        return X, design, fit_penalized(design, y, 0.2, PenaltySpec("scad", 0.1))

    def test_training_predictions(self, fitted):
        X, design, fit = fitted
        yhat, comps = predict(fit, X)
        assert_allclose(yhat, design.Z @ fit.coef.as_vector(), atol=1e-12)
        assert_allclose(comps.sum(axis=1) + fit.coef.mu, yhat, atol=1e-12)

    def test_inactive_components_zero(self, fitted):
        X, _, fit = fitted
        _, comps = predict(fit, X)
        inactive = [j for j in range(fit.p) if j not in fit.active_set]
        assert inactive
        assert_array_equal(comps[:, inactive], 0.0)

    def test_null_model_predicts_intercept(self):
        X, design, y = additive_data(16)
        fit = fit_penalized(design, y, 0.2, PenaltySpec("scad", 1e9))
        yhat, _ = predict(fit, X)
        assert_array_equal(yhat, fit.coef.mu)

    def test_column_count_checked(self, fitted):
        X, _, fit = fitted
        with pytest.raises(ValueError):
            predict(fit, X[:, :2])


class TestModelFit:
    def test_df_counts_nonzero_coefficients(self):
        _, design, y = additive_data(17, p=5)
        fit = fit_penalized(design, y, 0.1, PenaltySpec("scad", 0.1))
        assert fit.df == 1 + design.m * len(fit.active_set)
        assert fit.df == np.count_nonzero(fit.coef.as_vector())
