import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.optimize import minimize_scalar

from dpdam.penalty import (
    PenaltySpec,
    gram_norm,
    group_prox,
    mcp_threshold,
    penalty_derivative,
    penalty_second_derivative,
    penalty_value,
    scad_threshold,
    soft_threshold,
    threshold,
)

SPECS = [PenaltySpec("scad", 1.0, 3.7), PenaltySpec("mcp", 1.0, 3.0), PenaltySpec("glasso", 1.0)]


def radial_brute_force(x, spec, step):
    """Minimize 0.5 (t - |x|)^2 + step P(t) over t on a dense grid, then polish locally."""
    u = np.linalg.norm(x)
    grid = np.linspace(0.0, u, 200001)
    vals = 0.5 * (grid - u) ** 2 + step * penalty_value(grid, spec)
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    f = lambda t: 0.5 * (t - u) ** 2 + step * float(penalty_value(t, spec))
    best_t = grid[i]
    if hi > lo:
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
        if res.fun <= f(best_t):
            best_t = res.x
    return best_t * x / u if u > 0 else np.zeros_like(x)


class TestPenaltyValue:
    def test_scad_zero(self):
        assert penalty_value(0.0, PenaltySpec("scad", 1.0)) == 0.0

    @pytest.mark.parametrize("t", [3.7, 4.0, 100.0])
    def test_scad_flat_region(self, t):
        assert abs(penalty_value(t, PenaltySpec("scad", 1.0, 3.7)) - 2.35) <= 1e-12

    def test_mcp_flat_region(self):
        assert abs(penalty_value(3.0, PenaltySpec("mcp", 1.0, 3.0)) - 1.5) <= 1e-12

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_value_integrates_derivative(self, spec):
        t = np.linspace(0.0, 6.0, 60001)
        d = penalty_derivative(t, spec)
        integral = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(t))])
        assert_allclose(penalty_value(t, spec), integral, atol=1e-7)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_scaled_penalty_increasing_and_concave(self, spec):
        for lam in (0.3, 1.0, 2.5):
            s = spec.with_lam(lam)
            t = np.linspace(0.0, 10.0, 2001)
            v = penalty_value(t, s) / lam
            assert np.all(np.diff(v) >= -1e-15)
            assert np.all(np.diff(v, 2) <= 1e-12)


class TestPenaltyDerivative:
    def test_scad_inner_branch(self):
        assert penalty_derivative(0.5, PenaltySpec("scad", 1.0)) == 1.0

    def test_scad_flat(self):
        assert penalty_derivative(5.0, PenaltySpec("scad", 1.0, 3.7)) == 0.0

    def test_mcp_value(self):
        assert abs(penalty_derivative(1.0, PenaltySpec("mcp", 1.0, 2.0)) - 0.5) <= 1e-12

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_second_derivative_finite_difference(self, spec):
        t = np.array([0.3, 1.5, 2.5, 3.4, 5.0])
        h = 1e-6
        fd = (penalty_derivative(t + h, spec) - penalty_derivative(t - h, spec)) / (2 * h)
        assert_allclose(penalty_second_derivative(t, spec), fd, atol=1e-6)


class TestSoftThreshold:
    def test_halving(self):
        x = np.array([2.0, 0.0])
        assert_allclose(soft_threshold(x, 1.0), x / 2, atol=1e-12)

    def test_kills_small(self):
        assert_array_equal(soft_threshold(np.array([0.3, 0.4]), 0.5), 0.0)

    def test_three_four(self):
        assert_allclose(soft_threshold(np.array([3.0, 4.0]), 1.0), [2.4, 3.2], atol=1e-12)


class TestScadThreshold:
    def test_identity_beyond_gamma_lambda(self):
        x = np.array([3.0, 2.5])
        assert_array_equal(scad_threshold(x, 1.0, 3.7), x)

    def test_zero_inside_lambda(self):
        assert_array_equal(scad_threshold(np.array([0.6, 0.7]), 1.0, 3.7), 0.0)

    def test_middle_branch(self):
        # (1 - (3.7/2.7)/3) * 3 * 2.7/1.7 = 4.4/1.7
        assert_allclose(scad_threshold(np.array([3.0, 0.0]), 1.0, 3.7), [44.0 / 17.0, 0.0], atol=1e-12)


class TestMcpThreshold:
    def test_identity_beyond_gamma_lambda(self):
        x = np.array([3.5, 0.0])
        assert_array_equal(mcp_threshold(x, 1.0, 3.0), x)

    def test_zero_inside_lambda(self):
        assert_array_equal(mcp_threshold(np.array([0.5, 0.5]), 1.0, 3.0), 0.0)

    def test_middle_branch(self):
        assert_allclose(mcp_threshold(np.array([2.0, 0.0]), 1.0, 3.0), [1.5, 0.0], atol=1e-12)


class TestThresholdProperties:
    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_fixes_zero(self, spec):
        assert_array_equal(threshold(np.zeros(3), spec), 0.0)
        assert_array_equal(group_prox(np.zeros(3), spec, 0.7), 0.0)

    @pytest.mark.parametrize("spec", SPECS[:2], ids=lambda s: s.kind)
    def test_unbiased_region(self, spec):
        x = np.array([0.6, -0.8]) * (spec.shape * spec.lam + 0.5)
        assert_array_equal(threshold(x, spec), x)

    @pytest.mark.parametrize("spec", SPECS[:2], ids=lambda s: s.kind)
    def test_continuous_at_breakpoints(self, spec):
        direction = np.array([0.6, 0.8])
        for b in (spec.lam, 2 * spec.lam, spec.shape * spec.lam):
            lo = threshold((b - 1e-8) * direction, spec)
            hi = threshold((b + 1e-8) * direction, spec)
            assert np.linalg.norm(hi - lo) <= 1e-6

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_threshold_equals_unit_step_prox(self, spec):
        rng = np.random.default_rng(11)
        for _ in range(50):
            x = rng.normal(size=3) * 2
            assert_allclose(threshold(x, spec), group_prox(x, spec, 1.0), atol=1e-12)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_prox_matches_brute_force(self, spec):
        rng = np.random.default_rng({"scad": 1, "mcp": 2, "glasso": 3}[spec.kind])
        for _ in range(100):
            x = rng.normal(size=2) * 2.5
            step = rng.uniform(0.2, 1.0)
            assert_allclose(group_prox(x, spec, step), radial_brute_force(x, spec, step), atol=1e-6)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_prox_is_global_over_the_plane(self, spec):
        rng = np.random.default_rng(4)
        g = np.linspace(-5, 5, 401)
        Z = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        for _ in range(10):
            x = rng.normal(size=2) * 2
            obj = lambda z: 0.5 * np.sum((z - x) ** 2, axis=-1) + penalty_value(np.linalg.norm(z, axis=-1), spec)
            z = group_prox(x, spec, 1.0)
            assert obj(z[None, :])[0] <= obj(Z).min() + 1e-12


class TestGramNorm:
    def test_zero(self):
        assert gram_norm(np.zeros(3), np.eye(3)) == 0.0

    def test_identity(self):
        b = np.array([1.0, -2.0, 2.0])
        assert abs(gram_norm(b, np.eye(3)) - 3.0) <= 1e-12

    def test_quadratic_form(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            A = rng.normal(size=(4, 4))
            D = A @ A.T + 0.1 * np.eye(4)
            b = rng.normal(size=4)
            assert abs(gram_norm(b, D) - np.sqrt(b @ D @ b)) <= 1e-12 * max(1.0, np.sqrt(b @ D @ b))

    def test_indefinite_rejected(self):
        with pytest.raises(ValueError):
            gram_norm(np.ones(2), np.diag([1.0, -1.0]))


class TestSpec:
    def test_defaults(self):
        assert PenaltySpec("scad").shape == 3.7
        assert PenaltySpec("mcp").shape == 3.0

    @pytest.mark.parametrize("alias", ["grouplasso", "group_lasso", "lasso"])
    def test_aliases(self, alias):
        assert PenaltySpec(alias, 1.0).kind == "glasso"

    @pytest.mark.parametrize("kind,shape", [("scad", 2.0), ("mcp", 1.0), ("ridge", None)])
    def test_invalid(self, kind, shape):
        with pytest.raises(ValueError):
            PenaltySpec(kind, 1.0, shape)
