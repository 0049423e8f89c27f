"""Derived change quantities and per-individual factor scores.

For a reference schedule, the population-level mean and variance of three
latent quantities are derived per interval j = 2..J:

* rate-of-change (the interval rate for the latent basis form, the midpoint
  instantaneous rate for parametric forms),
* interval-specific change (rate times interval length),
* change-from-baseline (accumulated interval changes).

All three are linear in the growth factors given the schedule, so their
means and variances are the exact quadratic forms in the growth-factor
moments over the rate basis / cumulative rate basis; ``derived_moments_mc_check``
verifies this against a plain sampling oracle.  The schedule may be one
individual's schedule or the wave-mean schedule; measurement times are
treated as fixed when deriving these moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import FitResult, FitStatus
from .forms import (
    FunctionalForm,
    Kind,
    ParameterSet,
    Schedule,
    _cov_sqrt,
    _loading_block,
    _rate_basis,
)
from .moments import LongitudinalSample

__all__ = [
    "DerivedChange",
    "FactorScores",
    "derived_moments",
    "derived_moments_mc_check",
    "factor_scores",
]


@dataclass(frozen=True)
class DerivedChange:
    """Per-interval change moments on a reference schedule.

    Arrays have length J-1; entry j-2 belongs to the interval (and the
    post-baseline wave) j for j = 2..J.
    """

    rate_mean: np.ndarray
    rate_var: np.ndarray
    change_mean: np.ndarray
    change_var: np.ndarray
    cfb_mean: np.ndarray
    cfb_var: np.ndarray
    evaluated_at: Schedule


@dataclass(frozen=True)
class FactorScores:
    """Per-individual latent quantities implied by regression factor scores.

    ``rate`` and ``interval_change`` have one column per interval between an
    individual's consecutive observed occasions, aligned to the wave the
    interval ends at; ``cfb`` and ``true_score`` have one column per wave.
    Unobserved positions are NaN.
    """

    ids: np.ndarray
    eta: np.ndarray
    rate: np.ndarray
    interval_change: np.ndarray
    cfb: np.ndarray
    true_score: np.ndarray


def derived_moments(
    form: FunctionalForm, params: ParameterSet, schedule: Schedule
) -> DerivedChange:
    """Means and variances of rate, interval change, and change-from-baseline."""
    params.validate_for(form, n_waves=schedule.n_waves)
    basis = _rate_basis(form, params, schedule.midpoints)  # (J-1, k-1)
    dt = schedule.intervals
    mu = params.growth_means[1:]
    psi = params.growth_cov[1:, 1:]
    rate_mean = basis @ mu
    rate_var = np.einsum("jk,kl,jl->j", basis, psi, basis)
    change_mean = rate_mean * dt
    change_var = rate_var * dt**2
    cum = np.cumsum(basis * dt[:, None], axis=0)
    cfb_mean = np.cumsum(change_mean)
    cfb_var = np.einsum("jk,kl,jl->j", cum, psi, cum)
    return DerivedChange(
        rate_mean=rate_mean,
        rate_var=rate_var,
        change_mean=change_mean,
        change_var=change_var,
        cfb_mean=cfb_mean,
        cfb_var=cfb_var,
        evaluated_at=schedule,
    )


def derived_moments_mc_check(
    form: FunctionalForm,
    params: ParameterSet,
    schedule: Schedule,
    n_draws: int = 1_000_000,
    seed: int = 0,
) -> float:
    """Max relative discrepancy between ``derived_moments`` and a sampling
    oracle that pushes growth-factor draws through the exact per-individual
    rate/change recursions."""
    derived = derived_moments(form, params, schedule)
    rng = np.random.default_rng(seed)
    k = params.n_factors
    chol = _cov_sqrt(params.growth_cov)
    basis = _rate_basis(form, params, schedule.midpoints)
    dt = schedule.intervals
    m = dt.shape[0]
    sums = np.zeros((3, m))
    sumsq = np.zeros((3, m))
    done = 0
    while done < n_draws:
        chunk = min(200_000, n_draws - done)
        eta = params.growth_means + rng.standard_normal((chunk, k)) @ chol.T
        rate = eta[:, 1:] @ basis.T
        change = rate * dt
        cfb = np.cumsum(change, axis=1)
        for row, values in enumerate((rate, change, cfb)):
            sums[row] += values.sum(axis=0)
            sumsq[row] += (values**2).sum(axis=0)
        done += chunk
    mc_mean = sums / n_draws
    mc_var = np.maximum(sumsq / n_draws - mc_mean**2, 0.0) * n_draws / (n_draws - 1)
    pairs = [
        (derived.rate_mean, mc_mean[0]),
        (derived.change_mean, mc_mean[1]),
        (derived.cfb_mean, mc_mean[2]),
        (derived.rate_var, mc_var[0]),
        (derived.change_var, mc_var[1]),
        (derived.cfb_var, mc_var[2]),
    ]
    worst = 0.0
    for expected, observed in pairs:
        both_zero = (np.abs(expected) < 1e-12) & (np.abs(observed) < 1e-12)
        rel = np.abs(observed - expected) / np.maximum(np.abs(expected), 1e-12)
        rel[both_zero] = 0.0
        worst = max(worst, float(rel.max()))
    return worst


def factor_scores(
    form: FunctionalForm, fit: FitResult, sample: LongitudinalSample
) -> FactorScores:
    """Regression-method factor scores and the latent change quantities they
    imply, per individual.

    Uses each individual's observed rows: eta_hat = mu + Psi Lambda' Sigma^-1
    (y - mu_y), then rates/changes from the individual's own schedule.  The
    change-from-baseline column accumulates the interval changes, and the
    true-score column is eta_hat[0] plus change-from-baseline, so those
    identities hold exactly.
    """
    if fit.status is not FitStatus.CONVERGED:
        raise ValueError("factor scores require a converged fit")
    params = fit.params
    params.validate_for(form, n_waves=sample.n_waves)
    n, n_waves = sample.n_individuals, sample.n_waves
    k = form.n_factors
    eta = np.full((n, k), np.nan)
    rate = np.full((n, n_waves - 1), np.nan)
    change = np.full((n, n_waves - 1), np.nan)
    cfb = np.full((n, n_waves), np.nan)
    true_score = np.full((n, n_waves), np.nan)

    from .moments import _sample_groups

    for group in _sample_groups(sample):
        wave_index, idx = group.wave_index, group.idx
        t, y = group.times, group.outcomes
        lam = _loading_block(form, params, t, wave_index=wave_index)
        cov = (lam @ params.growth_cov) @ lam.transpose(0, 2, 1)
        d = np.einsum("ijj->ij", cov)
        d += params.residual_var
        resid = y - lam @ params.growth_means
        solved = np.linalg.solve(cov, resid[:, :, None])[:, :, 0]
        eta[idx] = params.growth_means + np.einsum(
            "kl,mjl,mj->mk", params.growth_cov, lam, solved
        )
        mid = (t[:, 1:] + t[:, :-1]) / 2.0
        dt = np.diff(t, axis=1)
        basis = _rate_basis(form, params, mid, np.asarray(wave_index)[1:] + 1)
        grp_rate = np.einsum("mjk,mk->mj", basis, eta[idx][:, 1:])
        grp_change = grp_rate * dt
        grp_cfb = np.concatenate(
            [np.zeros((idx.shape[0], 1)), np.cumsum(grp_change, axis=1)], axis=1
        )
        cols = np.asarray(wave_index)
        rate[np.ix_(idx, cols[1:] - 1)] = grp_rate
        change[np.ix_(idx, cols[1:] - 1)] = grp_change
        cfb[np.ix_(idx, cols)] = grp_cfb
        true_score[np.ix_(idx, cols)] = eta[idx][:, :1] + grp_cfb
    return FactorScores(
        ids=sample.ids, eta=eta, rate=rate, interval_change=change,
        cfb=cfb, true_score=true_score,
    )
