"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The two Monte Carlo
criteria fit several hundred models; expect a few minutes of wall time
(worker count follows LCSM_THREADS, defaulting to the CPU count).
"""

import time

import numpy as np
import pytest

from lcsm import (
    FitStatus,
    Framework,
    FunctionalForm,
    Kind,
    LongitudinalSample,
    ParameterSet,
    Schedule,
    build_loading_matrix,
    derived_moments_mc_check,
    factor_scores,
    fit,
    generate_dataset,
    implied_moments,
    loglik,
    loglik_by_individual,
    loglik_gradient,
    preset_design,
    run_study,
)
from lcsm.parameterization import free_param_names, natural_to_internal, pack_natural


def _report(number, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, f"criterion {number}: {detail}"


def test_criterion_1_quadratic_framework_equivalence():
    """Change-score and growth-curve quadratic fits agree to 1e-4 in every
    point estimate and in -2ll, on 20 simulated datasets."""
    t0 = time.perf_counter()
    design = preset_design("quad-n200-w6-r1", replications=20, seed=20260801)
    worst_est, worst_ll = 0.0, 0.0
    for rep in range(20):
        sample, _ = generate_dataset(design, rep)
        res_c = fit(FunctionalForm(Kind.QUADRATIC, Framework.LCSM), sample)
        res_g = fit(FunctionalForm(Kind.QUADRATIC, Framework.LGCM), sample)
        assert res_c.status is FitStatus.CONVERGED
        assert res_g.status is FitStatus.CONVERGED
        worst_est = max(worst_est, float(np.max(np.abs(res_c.estimates - res_g.estimates))))
        worst_ll = max(worst_ll, abs(res_c.minus2ll - res_g.minus2ll))
    elapsed = time.perf_counter() - t0
    ok = worst_est <= 1e-4 and worst_ll <= 1e-4
    _report(
        1, ok,
        f"max |estimate diff| {worst_est:.2e}, max |-2ll diff| {worst_ll:.2e} "
        f"(tol 1e-4; 20 datasets in {elapsed:.0f}s)",
    )


def test_criterion_2_lbgm_recovery():
    """Latent basis model, n=500, 10 unequal waves, decreasing rates, S=200:
    every free parameter within 3% relative bias, coverage in [0.91, 0.98],
    100% convergence."""
    t0 = time.perf_counter()
    design = preset_design("lbgm-n500-w10u-r1-dec", replications=200, seed=20260802)
    summary = run_study(design, fit_targets=("lcsm",))["lcsm"]
    elapsed = time.perf_counter() - t0
    worst_bias = max(abs(r.relative_bias) for r in summary.parameters.values())
    cov_lo = min(r.coverage for r in summary.parameters.values())
    cov_hi = max(r.coverage for r in summary.parameters.values())
    ok = (
        worst_bias <= 0.03
        and cov_lo >= 0.91
        and cov_hi <= 0.98
        and summary.convergence_rate == 1.0
    )
    _report(
        2, ok,
        f"max |relative bias| {worst_bias:.4f} (tol 0.03), coverage range "
        f"[{cov_lo:.3f}, {cov_hi:.3f}] (band [0.91, 0.98]), convergence "
        f"{summary.convergence_rate:.1%} ({elapsed:.0f}s for S=200)",
    )


def test_criterion_3_loading_telescoping():
    """1000 random schedules with t1 = 0: quadratic change-score loadings
    reproduce the closed-form (1, t, t^2) rows to 1e-12."""
    rng = np.random.default_rng(3)
    params = ParameterSet([50, 16, -1.5], np.diag([25, 1, 0.09]), 1.0)
    form = FunctionalForm(Kind.QUADRATIC, Framework.LCSM)
    worst = 0.0
    for _ in range(1000):
        n_waves = int(rng.integers(3, 11))
        gaps = rng.uniform(0.2, 1.6, n_waves - 1)
        sched = Schedule(np.concatenate([[0.0], np.cumsum(gaps)]))
        lam = build_loading_matrix(form, params, sched).values
        closed = np.column_stack([np.ones(n_waves), sched.times, sched.times**2])
        worst = max(worst, float(np.max(np.abs(lam - closed))))
    ok = worst <= 1e-12
    _report(3, ok, f"max loading deviation {worst:.2e} over 1000 schedules (tol 1e-12)")


def test_criterion_4_delta_method_oracle():
    """Derived rate/change/baseline-change moments match a 1e6-draw sampling
    oracle within 1% for every functional form."""
    cases = [
        ("lbgm-n500-w10u-r1-dec", 41),
        ("quad-n200-w6-r1", 42),
        ("exp-n500-w10u-r1-b04", 43),
        ("jb-n200-w10u-r1-s25", 44),
    ]
    worst_overall, details = 0.0, []
    for preset, seed in cases:
        design = preset_design(preset, replications=1, seed=seed)
        err = derived_moments_mc_check(
            design.fitted_form("lcsm"),
            design.parameter_set(),
            Schedule(np.array(design.waves)),
            n_draws=1_000_000,
            seed=seed,
        )
        details.append(f"{preset.split('-')[0]} {err:.4f}")
        worst_overall = max(worst_overall, err)
    ok = worst_overall < 0.01
    _report(4, ok, f"max relative error {', '.join(details)} (tol 0.01, 1e6 draws)")


def _random_instance(rng, kind):
    n = int(rng.integers(1, 6))
    n_waves = int(rng.integers(2, 5))
    starts = rng.uniform(0.0, 0.5, size=(n, 1))
    gaps = rng.uniform(0.4, 1.4, size=(n, n_waves - 1))
    times = np.concatenate([starts, starts + np.cumsum(gaps, axis=1)], axis=1)
    k = 2 if kind in (Kind.NONPARAMETRIC, Kind.NEGATIVE_EXPONENTIAL) else 3
    a = 0.4 * rng.normal(size=(k, k))
    cov = a @ a.T + 0.3 * np.eye(k)
    kwargs = {}
    if kind is Kind.NONPARAMETRIC:
        kwargs["gamma"] = np.concatenate([[1.0], rng.uniform(0.3, 1.7, n_waves - 2)])
    elif kind is Kind.NEGATIVE_EXPONENTIAL:
        kwargs["b"] = float(rng.uniform(0.2, 0.8))
    elif kind is Kind.JENSS_BAYLEY:
        kwargs["c"] = float(-rng.uniform(0.2, 0.8))
    params = ParameterSet(
        rng.normal(20, 5, k), cov, float(rng.uniform(0.5, 2.0)), **kwargs
    )
    form = FunctionalForm(kind, Framework.LCSM)
    from lcsm.forms import _loading_block

    mean = _loading_block(form, params, times) @ params.growth_means
    y = mean + rng.normal(0.0, 2.0, size=(n, n_waves))
    sample = LongitudinalSample(np.arange(n), y, times)
    return form, params, sample


def _dense_oracle(form, params, sample):
    """Textbook det/inv multivariate-normal density over each individual's
    observed entries (loadings built on the observed subschedule)."""
    from lcsm.forms import _loading_block

    total = 0.0
    for i in range(sample.n_individuals):
        obs = np.flatnonzero(sample.observed_mask[i])
        lam = _loading_block(
            form, params, sample.times[i, obs][None, :], wave_index=obs
        )[0]
        mean = lam @ params.growth_means
        cov = lam @ params.growth_cov @ lam.T + params.residual_var * np.eye(len(obs))
        y = sample.outcomes[i, obs]
        diff = y - mean
        j = y.shape[0]
        total += -0.5 * (
            j * np.log(2 * np.pi)
            + np.log(np.linalg.det(cov))
            + diff @ np.linalg.inv(cov) @ diff
        )
    return total


def test_criterion_5_likelihood_oracle():
    """50 random small instances: production likelihood matches the textbook
    dense density to 1e-10, with and without a deleted entry."""
    rng = np.random.default_rng(5)
    kinds = list(Kind)
    worst_full, worst_sub = 0.0, 0.0
    for case in range(50):
        form, params, sample = _random_instance(rng, kinds[case % 4])
        worst_full = max(
            worst_full, abs(loglik(form, params, sample) - _dense_oracle(form, params, sample))
        )
        # delete one entry from an individual that keeps >= 2 observations
        rich = [i for i in range(sample.n_individuals) if sample.observed_mask[i].sum() >= 3]
        if not rich:
            continue
        i = rich[int(rng.integers(len(rich)))]
        j = int(rng.integers(sample.n_waves))
        y = sample.outcomes.copy()
        t = sample.times.copy()
        y[i, j] = np.nan
        t[i, j] = np.nan
        masked = LongitudinalSample(sample.ids, y, t)
        worst_sub = max(
            worst_sub, abs(loglik(form, params, masked) - _dense_oracle(form, params, masked))
        )
    ok = worst_full <= 1e-10 and worst_sub <= 1e-10
    _report(
        5, ok,
        f"max |diff| full {worst_full:.2e}, subsetted {worst_sub:.2e} (tol 1e-10)",
    )


def test_criterion_6_gradient_sanity():
    """Central differences shrink like O(h^2) against the Richardson limit,
    and at the generating truth on n=5000 data every gradient component is
    within 3 Monte Carlo SEs of zero."""
    from dataclasses import replace

    design = preset_design("quad-n200-w6-r1", replications=1, seed=606)
    design = replace(design, n=5000)
    sample, _ = generate_dataset(design, 0)
    form = design.fitted_form("lcsm")
    truth = design.parameter_set()

    g_h = loglik_gradient(form, truth, sample, step_floor=2e-3, step_rel=0.0)
    g_h2 = loglik_gradient(form, truth, sample, step_floor=1e-3, step_rel=0.0)
    richardson = (4.0 * g_h2 - g_h) / 3.0
    err_h = np.abs(g_h - richardson)
    err_h2 = np.abs(g_h2 - richardson)
    meaningful = err_h > 1e-6 * (1.0 + np.abs(richardson))
    ratio = float(np.median(err_h[meaningful] / err_h2[meaningful]))
    order_ok = 2.5 <= ratio <= 5.5

    from lcsm.parameterization import internal_to_natural, unpack_natural

    x = natural_to_internal(form, pack_natural(form, truth), sample.n_waves)
    n = sample.n_individuals
    p = x.shape[0]
    contrib = np.empty((n, p))
    for j in range(p):
        h = max(1e-6, 1e-7 * abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        p_up = unpack_natural(form, internal_to_natural(form, up, sample.n_waves), sample.n_waves)
        p_dn = unpack_natural(form, internal_to_natural(form, down, sample.n_waves), sample.n_waves)
        contrib[:, j] = (
            loglik_by_individual(form, p_up, sample)
            - loglik_by_individual(form, p_dn, sample)
        ) / (2.0 * h)
    total = contrib.sum(axis=0)
    se = np.sqrt(n * contrib.var(axis=0, ddof=1))
    z = np.abs(total) / se
    score_ok = bool(np.all(z <= 3.0))
    ok = order_ok and score_ok
    _report(
        6, ok,
        f"step-halving error ratio {ratio:.2f} (expect ~4), max |gradient z-score| "
        f"{z.max():.2f} at truth on n=5000 (limit 3)",
    )


def test_criterion_7_negative_exponential_directional_bias():
    """Data generated from the growth-curve form: the midpoint-rate
    change-score fit overestimates the vertical-distance mean (relative bias
    positive, at most 0.06) while the growth-curve fit stays within 1.5%."""
    t0 = time.perf_counter()
    design = preset_design("exp-n500-w10u-r1-b04", replications=200, seed=20260807)
    summaries = run_study(design, fit_targets=("lcsm", "lgcm"))
    elapsed = time.perf_counter() - t0
    bias_lcsm = summaries["lcsm"].parameters["mu_eta1"].relative_bias
    bias_lgcm = summaries["lgcm"].parameters["mu_eta1"].relative_bias
    ok = (0.0 < bias_lcsm <= 0.06) and abs(bias_lgcm) <= 0.015
    _report(
        7, ok,
        f"vertical-distance relative bias: change-score {bias_lcsm:+.4f} "
        f"(want positive, <= 0.06), growth-curve {bias_lgcm:+.4f} "
        f"(band +/-0.015; S=200 in {elapsed:.0f}s)",
    )


def test_criterion_8_factor_score_identity_chain():
    """For every fitted form and every individual: the true-score column is
    eta0 plus change-from-baseline and change-from-baseline accumulates the
    interval changes, to 1e-12."""
    presets = [
        "lbgm-n200-w6-r1-dec",
        "quad-n200-w6-r1",
        "exp-n200-w6-r1-b04",
        "jb-n200-w10u-r1-s25",
    ]
    worst = 0.0
    from dataclasses import replace

    for pos, preset in enumerate(presets):
        design = preset_design(preset, replications=1, seed=800 + pos)
        design = replace(design, n=120)
        sample, _ = generate_dataset(design, 0)
        if pos == 1:  # also exercise the missing-data path
            y = sample.outcomes.copy()
            t = sample.times.copy()
            y[5, 2] = np.nan
            t[5, 2] = np.nan
            sample = LongitudinalSample(sample.ids, y, t)
        form = design.fitted_form("lcsm")
        result = fit(form, sample)
        assert result.status is FitStatus.CONVERGED, preset
        scores = factor_scores(form, result, sample)
        cfb_from_changes = np.nancumsum(
            np.where(np.isnan(scores.interval_change), 0.0, scores.interval_change),
            axis=1,
        )
        obs = ~np.isnan(scores.cfb)
        dev1 = np.abs(scores.cfb[:, 1:] - cfb_from_changes)[obs[:, 1:]]
        dev2 = np.abs(
            scores.true_score - (scores.eta[:, :1] + scores.cfb)
        )[obs]
        worst = max(worst, float(dev1.max()), float(dev2.max()))
    ok = worst <= 1e-12
    _report(8, ok, f"max identity deviation {worst:.2e} over 4 forms (tol 1e-12)")
