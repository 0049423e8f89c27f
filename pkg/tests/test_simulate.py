import numpy as np
import pytest

from lcsm import (
    Kind,
    SimulationDesign,
    WAVES_10_UNEQUAL,
    compute_metrics,
    generate_dataset,
    preset_design,
    preset_names,
    run_study,
)
from lcsm.parameterization import free_param_names, pack_natural


def test_preset_grid_resolves():
    names = preset_names()
    assert "lbgm-n500-w10u-r1-dec" in names
    design = preset_design("lbgm-n500-w10u-r1-dec")
    assert design.kind is Kind.NONPARAMETRIC
    assert design.n == 500
    assert design.waves == WAVES_10_UNEQUAL
    assert design.residual_var == 1.0
    assert design.gamma == (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2)
    assert design.growth_means == (50.0, 3.0)
    assert design.growth_sds == (5.0, 1.0)
    for name in names:
        preset_design(name)
    with pytest.raises(ValueError):
        preset_design("lbgm-n300-w10u-r1-dec")


def test_design_covariance_uses_common_correlation():
    design = preset_design("jb-n200-w6-r2-s25")
    params = design.parameter_set()
    cov = params.growth_cov
    np.testing.assert_allclose(np.diag(cov), [25.0, 1.0, 9.0])
    assert cov[0, 1] == pytest.approx(0.3 * 5 * 1)
    assert cov[0, 2] == pytest.approx(0.3 * 5 * 3)
    assert cov[1, 2] == pytest.approx(0.3 * 1 * 3)
    assert design.residual_var == 2.0


def test_generated_times_respect_design_windows():
    design = preset_design("quad-n200-w10u-r1", replications=1, seed=5)
    sample, eta = generate_dataset(design, 0)
    times = sample.times
    waves = np.array(design.waves)
    assert np.all((times[:, 0] >= -0.25) & (times[:, 0] <= 0.25))
    for j in range(1, len(waves)):
        assert np.all(np.abs(times[:, j] - waves[j]) <= 0.25)
    assert np.all(np.diff(times, axis=1) > 0)
    assert eta.shape == (200, 3)


def test_generated_factor_correlation_matches_rho():
    from dataclasses import replace

    design = preset_design("lbgm-n500-w6-r1-dec", replications=1, seed=11)
    design = replace(design, n=100_000)
    sample, eta = generate_dataset(design, 0)
    corr = np.corrcoef(eta[:, 0], eta[:, 1])[0, 1]
    assert corr == pytest.approx(0.30, abs=0.01)
    assert eta[:, 0].mean() == pytest.approx(50.0, abs=0.1)
    assert eta[:, 1].std(ddof=1) == pytest.approx(1.0, abs=0.02)


def test_degenerate_generation_gives_shared_curve():
    from dataclasses import replace

    design = preset_design("exp-n200-w6-r1-b04", replications=1, seed=1)
    design = replace(design, growth_sds=(0.0, 0.0), residual_var=1e-12, n=20)
    sample, eta = generate_dataset(design, 0)
    # same factors; outcomes differ only through individual times
    np.testing.assert_allclose(eta, np.tile([50.0, 30.0], (20, 1)), atol=1e-9)
    mu = 50.0 + 30.0 * (1.0 - np.exp(-0.4 * sample.times))
    np.testing.assert_allclose(sample.outcomes, mu, atol=1e-4)


def test_generation_is_reproducible_and_order_free():
    design = preset_design("lbgm-n200-w6-r1-inc", replications=5, seed=123)
    s3a, eta3a = generate_dataset(design, 3)
    s0, _ = generate_dataset(design, 0)
    s3b, eta3b = generate_dataset(design, 3)
    np.testing.assert_array_equal(s3a.outcomes, s3b.outcomes)
    np.testing.assert_array_equal(s3a.times, s3b.times)
    np.testing.assert_array_equal(eta3a, eta3b)
    assert not np.array_equal(s3a.outcomes, s0.outcomes)


def test_metric_formulas_hand_values():
    est = np.array([0.9, 1.0, 1.1])
    wide = np.array([0.0, 0.0, 0.0]), np.array([2.0, 2.0, 2.0])
    row = compute_metrics(est, wide[0], wide[1], truth=1.0)
    assert row.relative_bias == pytest.approx(0.0, abs=1e-15)
    assert row.empirical_se == pytest.approx(0.1, abs=1e-12)
    assert row.relative_rmse == pytest.approx(0.08164965809277261, abs=1e-12)
    assert row.coverage == 1.0
    assert row.mc_se_bias == pytest.approx(0.1 / np.sqrt(3), abs=1e-12)


def test_metric_formulas_exact_estimates():
    est = np.full(4, 2.5)
    row = compute_metrics(est, est - 0.1, est + 0.1, truth=2.5)
    assert row.relative_bias == 0.0
    assert row.relative_rmse == 0.0
    assert row.coverage == 1.0


def test_metric_sign_convention_for_negative_truth():
    # dividing by a negative truth flips the sign of bias and RMSE
    est = np.array([-1.4, -1.6])
    row = compute_metrics(est, est - 1, est + 1, truth=-1.5)
    assert row.relative_bias == pytest.approx(0.0, abs=1e-12)
    assert row.relative_rmse < 0


def test_run_study_smoke_and_determinism():
    from dataclasses import replace

    design = preset_design("lbgm-n200-w6-r1-dec", replications=3, seed=77)
    design = replace(design, n=60)
    first = run_study(design, fit_targets=("lcsm",), workers=1)
    second = run_study(design, fit_targets=("lcsm",), workers=1)
    summary = first["lcsm"]
    assert summary.n_kept == 3
    assert summary.convergence_rate == 1.0
    names = free_param_names(design.fitted_form("lcsm"), design.n_waves)
    assert set(summary.parameters) == set(names)
    truth = pack_natural(design.fitted_form("lcsm"), design.parameter_set())
    for name, value in zip(names, truth):
        assert summary.parameters[name].truth == pytest.approx(value)
        assert summary.parameters[name].relative_bias == pytest.approx(
            second["lcsm"].parameters[name].relative_bias, abs=0.0
        )


def test_run_study_rejects_bad_target():
    design = preset_design("lbgm-n200-w6-r1-dec", replications=2, seed=1)
    with pytest.raises(ValueError):
        run_study(design, fit_targets=("lgcm",))


def test_quadratic_framework_equivalence_single_replication():
    from dataclasses import replace

    design = preset_design("quad-n200-w6-r1", replications=1, seed=31)
    design = replace(design, n=120)
    out = run_study(
        design, fit_targets=("lcsm", "lgcm"), workers=1, keep_replications=True
    )
    summaries, records = out
    est_lcsm = records["lcsm"][0]["estimates"]
    est_lgcm = records["lgcm"][0]["estimates"]
    for name in est_lcsm:
        assert est_lcsm[name] == pytest.approx(est_lgcm[name], abs=1e-4)
    assert records["lcsm"][0]["minus2ll"] == pytest.approx(
        records["lgcm"][0]["minus2ll"], abs=1e-4
    )
