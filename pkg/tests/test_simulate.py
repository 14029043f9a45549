import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from dpdam.simulate import (
    FUNCTION_KINDS,
    ExperimentSettings,
    Scenario,
    compute_mse_sigma,
    compute_rmpe_mad,
    compute_rpe,
    compute_selection_metrics,
    compute_trimmed_mpe,
    dump_scenario,
    empirical_snr,
    gen_covariates,
    gen_errors,
    gen_response,
    gen_true_model,
    heavy_tail_scenario,
    load_scenario,
    replicate_rng,
    run_experiment,
    scenario_from_mapping,
    simulate_replicate,
    benchmark_scenario,
)

SMALL = ExperimentSettings(nus=(0.0, 0.5), n_lambda=6)


class TestScenario:
    def test_benchmark_defaults(self):
        sc = benchmark_scenario(True)
        assert (sc.n, sc.p, sc.q, sc.rho, sc.sigma) == (250, 15, 8, 0.5, 1.0)
        assert sc.contam_frac == 0.05 and sc.contam_shift == 8.0
        assert benchmark_scenario(False).error_kind == "gaussian"

    def test_heavy_tail_dimensions(self):
        assert heavy_tail_scenario("cauchy").p == 20
        assert heavy_tail_scenario("chisq1").p == 15
        assert not heavy_tail_scenario("cauchy").pure_test

    @pytest.mark.parametrize(
        "kw", [{"q": 7}, {"p": 5}, {"contam_frac": 0.5}, {"trim_fraction": -0.1}, {"error_kind": "t"}, {"n": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Scenario(**kw)

    def test_file_round_trip(self, tmp_path):
        sc = benchmark_scenario(True, seed=17, n_replicates=3)
        path = tmp_path / "sc.ini"
        path.write_text(dump_scenario(sc))
        assert load_scenario(path) == sc

    def test_aliases(self):
        sc = scenario_from_mapping({"error": "contaminated", "contamination": "0.1", "omega": "0.1", "replicates": "4"})
        assert (sc.error_kind, sc.contam_frac, sc.trim_fraction, sc.n_replicates) == ("contaminated", 0.1, 0.1, 4)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown scenario key"):
            scenario_from_mapping({"colour": "red"})


class TestCovariates:
    def test_unit_interval(self):
        _, X = gen_covariates(Scenario(n=2000), np.random.default_rng(0))
        assert X.min() > 0 and X.max() < 1

    def test_independent_at_rho_zero(self):
        n = 5000
        _, X = gen_covariates(Scenario(n=n, rho=0.0), np.random.default_rng(1))
        C = np.corrcoef(X, rowvar=False)
        assert np.max(np.abs(C[np.triu_indices_from(C, 1)])) <= 3 / math.sqrt(n) * 1.5

    def test_adjacent_rank_correlation(self):
        _, X = gen_covariates(Scenario(n=10000), np.random.default_rng(2))
        expected = 6 / math.pi * math.asin(0.5 / 2)
        for j in range(3):
            rho_s = stats.spearmanr(X[:, j], X[:, j + 1]).statistic
            assert abs(rho_s - expected) <= 0.03


class TestTrueModel:
    @pytest.mark.parametrize("seed", range(10))
    def test_invariants(self, seed):
        model = gen_true_model(Scenario(p=20), np.random.default_rng(seed))
        assert len(set(model.active.tolist())) == 8
        assert np.all((np.abs(model.coefs) >= 1) & (np.abs(model.coefs) <= 2))
        assert np.sum(model.coefs > 0) == 4
        assert model.kinds == FUNCTION_KINDS

    def test_too_few_covariates(self):
        with pytest.raises(ValueError):
            Scenario(p=7)

    def test_centered_components(self):
        rng = np.random.default_rng(3)
        model = gen_true_model(Scenario(), rng)
        _, X = gen_covariates(Scenario(), rng)
        centered = model.centered_on(X)
        assert_allclose(centered.components(X).mean(axis=0), 0.0, atol=1e-12)

    def test_snr_near_reported(self):
        snr = empirical_snr(benchmark_scenario(False), replicates=40)
        assert 0.75 * 5.2763 <= snr <= 1.25 * 5.2763


class TestErrors:
    def test_zero_noise_reproduces_signal(self):
        sc = Scenario(sigma=0.0)
        rng = np.random.default_rng(4)
        model = gen_true_model(sc, rng)
        _, X = gen_covariates(sc, rng)
        y, _ = gen_response(X, model, sc, rng)
        assert_array_equal(y, model.signal(X))

    def test_zero_fraction_is_gaussian(self):
        sc = Scenario(error_kind="contaminated", contam_frac=0.0)
        a, mask = gen_errors(sc, 500, np.random.default_rng(5))
        b, _ = gen_errors(Scenario(), 500, np.random.default_rng(5))
        assert not mask.any()
        assert_array_equal(a, b)

    def test_mask_frequency(self):
        n, eps = 100_000, 0.05
        _, mask = gen_errors(benchmark_scenario(True), n, np.random.default_rng(6))
        assert abs(mask.mean() - eps) <= 3 * math.sqrt(eps * (1 - eps) / n)

    def test_contaminated_draws_are_shifted(self):
        e, mask = gen_errors(benchmark_scenario(True), 100_000, np.random.default_rng(7))
        assert abs(e[mask].mean() - 8.0) <= 0.1
        assert abs(e[~mask].mean()) <= 0.02

    def test_pure_draws_never_contaminated(self):
        e, mask = gen_errors(benchmark_scenario(True), 20_000, np.random.default_rng(8), pure=True)
        assert not mask.any()
        assert stats.kstest(e, "norm").pvalue > 1e-3

    def test_cauchy_is_bounded(self):
        e, _ = gen_errors(heavy_tail_scenario("cauchy"), 100_000, np.random.default_rng(9))
        assert np.max(np.abs(e)) <= 1e6

    def test_chisq_as_drawn(self):
        e, _ = gen_errors(heavy_tail_scenario("chisq1"), 100_000, np.random.default_rng(10))
        assert e.min() >= 0
        assert abs(e.mean() - 1.0) <= 0.03

    def test_replicate_test_set_is_pure(self):
        sc = benchmark_scenario(True, contam_frac=0.4)
        model, X, y, mask, X_test, y_test = simulate_replicate(sc, 0)
        assert mask.mean() > 0.2
        assert stats.kstest(y_test - model.signal(X_test), "norm").pvalue > 1e-3


class TestMetrics:
    def test_rpe(self):
        assert compute_rpe([1.0, 2.0], [0.0, 0.0], 1.0) == 2.5
        assert compute_rpe([3.0, 4.0], [3.0, 4.0], 2.0) == 0.0

    def test_rpe_mean_prediction_has_unit_expectation(self):
        y = np.random.default_rng(11).normal(size=200_000) * 2.0
        assert compute_rpe(np.zeros_like(y), y, 4.0) == pytest.approx(1.0, abs=0.01)

    def test_trimmed_mpe(self):
        assert compute_trimmed_mpe([0, 0, 0, 10], [0, 0, 0, 0], 0.25) == 0.0
        assert compute_trimmed_mpe([0, 0, 0, 10], [0, 0, 0, 0], 0.0) == 25.0

    def test_rmpe_mad(self):
        rmpe, mad = compute_rmpe_mad([3.0, 4.0], [0.0, 0.0])
        assert rmpe == pytest.approx(math.sqrt(12.5), abs=1e-15)
        assert mad == 3.5

    def test_rmpe_dominates_mad(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            rmpe, mad = compute_rmpe_mad(rng.standard_cauchy(50), np.zeros(50))
            assert rmpe >= mad

    def test_selection_metrics(self):
        truth = range(8)
        sens, spec, dim, flag = compute_selection_metrics(list(range(8)) + [10], truth, 15, 8)
        assert (sens, dim, flag) == (1.0, 40.0, False)
        assert spec == pytest.approx(6 / 7, abs=1e-15)
        assert compute_selection_metrics(range(15), truth, 15, 8)[:3] == (1.0, 0.0, 0.0)
        assert compute_selection_metrics((), truth, 15, 8)[:2] == (0.0, 1.0)

    def test_specificity_flag_when_all_active(self):
        assert compute_selection_metrics(range(4), range(8), 8, 8) == (0.5, 1.0, 50.0, True)

    def test_mse_sigma(self):
        assert compute_mse_sigma([0.9, 1.1], 1.0) == pytest.approx(0.01, abs=1e-15)

    @pytest.mark.parametrize(
        "call",
        [
            lambda: compute_rpe([1.0], [1.0, 2.0], 1.0),
            lambda: compute_rpe([1.0], [1.0], 0.0),
            lambda: compute_trimmed_mpe([1.0], [1.0], 0.5),
            lambda: compute_rmpe_mad([1.0, 2.0], [1.0]),
            lambda: compute_selection_metrics([], [], 5, 0),
        ],
    )
    def test_errors(self, call):
        with pytest.raises(ValueError):
            call()


class TestExperiment:
    def test_replicate_streams_are_independent_of_order(self):
        a = replicate_rng(3, 5).random(4)
        replicate_rng(3, 4).random(100)
        assert_array_equal(replicate_rng(3, 5).random(4), a)
        assert not np.array_equal(replicate_rng(3, 6).random(4), a)

    def test_oracle_and_null_baselines(self):
        sc = Scenario(n=2000, p=10, n_test=4000, n_replicates=3, seed=1)
        rep = run_experiment(sc, ("oracle", "null"), SMALL)
        assert rep.metric("oracle", "rpe") == pytest.approx(1.0, abs=0.1)
        assert rep.metric("oracle", "sensitivity") == 1.0
        assert rep.metric("null", "sensitivity") == 0.0
        assert rep.metric("null", "specificity") == 1.0
        assert rep.metric("null", "rpe") > 3.0

    def test_metric_bounds(self):
        sc = benchmark_scenario(True, n=150, n_test=300, n_replicates=2, seed=2)
        rep = run_experiment(sc, ("dpd-bic", "ls", "glasso"), SMALL)
        for est in rep.estimators:
            assert rep.n_ok[est] == 2
            m = rep.mean[est]
            assert 0 <= m["sensitivity"] <= 1 and 0 <= m["specificity"] <= 1
            assert 0 <= m["dim_reduction"] <= 100
            assert m["rpe"] >= 0 and m["rmpe"] >= m["mad"]

    def test_heavy_tail_skips_sigma_metrics(self):
        sc = heavy_tail_scenario("cauchy", n=150, n_test=300, n_replicates=1)
        rep = run_experiment(sc, ("ls",), SMALL)
        assert math.isnan(rep.metric("ls", "rpe"))
        assert math.isnan(rep.metric("ls", "mse_sigma"))
        assert np.isfinite(rep.metric("ls", "mpe_trimmed"))

    def test_reproducible_across_thread_counts(self):
        sc = benchmark_scenario(True, n=120, n_test=200, n_replicates=3, seed=9)
        a = run_experiment(sc, ("dpd-bic", "dpd-cp", "ls"), SMALL, threads=1)
        b = run_experiment(sc, ("dpd-bic", "dpd-cp", "ls"), SMALL, threads=3)
        assert a.to_csv() == b.to_csv()
        assert [r.nu for r in a.records] == [r.nu for r in b.records]

    def test_trim_fraction_only_changes_trimmed_column(self):
        sc = benchmark_scenario(True, n=150, n_test=300, n_replicates=2, seed=4)
        a = run_experiment(sc, ("ls",), SMALL)
        b = run_experiment(sc.with_(trim_fraction=0.2), ("ls",), SMALL)
        for m in a.mean["ls"]:
            if m == "mpe_trimmed":
                assert b.mean["ls"][m] < a.mean["ls"][m]
            else:
                assert a.mean["ls"][m] == b.mean["ls"][m]

    def test_unknown_estimator(self):
        with pytest.raises(ValueError):
            run_experiment(Scenario(n_replicates=1), ("ridge",))

    def test_contamination_monotone_for_least_squares(self):
        means = []
        for frac in (0.0, 0.05, 0.10):
            sc = Scenario(error_kind="contaminated", contam_frac=frac, n_replicates=50, n_test=500, seed=21)
            means.append(run_experiment(sc, ("ls",), SMALL).metric("ls", "rpe"))
        assert means[0] <= means[1] <= means[2]

    def test_report_formats(self):
        sc = benchmark_scenario(False, n=150, n_test=200, n_replicates=2)
        rep = run_experiment(sc, ("ls", "null"), SMALL)
        csv = rep.to_csv().splitlines()
        assert len(csv) == 3
        assert csv[0].startswith("scenario,estimator,n_ok,n_failed,rpe_mean,rpe_sd")
        value = float(csv[1].split(",")[4])
        assert value == rep.metric("ls", "rpe")
        assert "snr=" in rep.to_table()
