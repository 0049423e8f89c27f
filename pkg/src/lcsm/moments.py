"""Model-implied moments and the FIML log-likelihood.

Each individual contributes a multivariate-normal log-density evaluated on
their observed entries only: the loading matrix is built on the subsetted
schedule, so missing waves simply drop out (missing-at-random handling, no
listwise deletion).  Individuals sharing an observation pattern are batched,
and the per-individual terms are reduced with numpy's pairwise summation in
a fixed index order, so a given sample always reduces identically.

The implied covariance ``theta * I + (Lambda A)(Lambda A)'`` (A a square
root of the growth covariance) is factored through its k x k core
``theta * I_k + A' Lambda' Lambda A``, which keeps the per-evaluation cost
linear in the number of waves; the acceptance suite checks this path against
an independently coded dense density.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .forms import FunctionalForm, ParameterSet, Schedule, _cov_sqrt, _loading_block

__all__ = [
    "LongitudinalSample",
    "ImpliedMoments",
    "SingularCovarianceError",
    "implied_moments",
    "loglik",
    "loglik_by_individual",
    "loglik_gradient",
]

LOG_2PI = float(np.log(2.0 * np.pi))

#: evaluations report failure rather than garbage beyond this conditioning
CONDITION_BOUND = 1e12


class SingularCovarianceError(RuntimeError):
    """Implied covariance too ill-conditioned to evaluate for an individual."""

    def __init__(self, individual_id, detail=""):
        self.individual_id = individual_id
        msg = f"implied covariance numerically singular for individual {individual_id!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(frozen=True)
class LongitudinalSample:
    """Outcomes and per-individual measurement times in wide layout.

    ``outcomes`` and ``times`` are n x J with NaN marking missing entries;
    a time must be present wherever the outcome is.  Individuals with fewer
    than two observed entries are dropped at construction (counted in
    ``n_excluded`` and reported through a warning).
    """

    ids: np.ndarray
    outcomes: np.ndarray
    times: np.ndarray
    n_excluded: int = field(default=0)

    def __post_init__(self):
        ids = np.atleast_1d(np.asarray(self.ids))
        y = np.atleast_2d(np.asarray(self.outcomes, dtype=float))
        t = np.atleast_2d(np.asarray(self.times, dtype=float))
        if y.shape != t.shape or y.shape[0] != ids.shape[0]:
            raise ValueError(
                f"shape mismatch: ids {ids.shape}, outcomes {y.shape}, times {t.shape}"
            )
        observed = ~np.isnan(y)
        if np.any(observed & np.isnan(t)):
            bad = ids[np.any(observed & np.isnan(t), axis=1)]
            raise ValueError(f"time missing where outcome present for ids {bad.tolist()}")
        keep = observed.sum(axis=1) >= 2
        n_dropped = int(np.sum(~keep))
        if n_dropped:
            warnings.warn(
                f"excluded {n_dropped} individual(s) with fewer than 2 observed "
                f"entries: {ids[~keep].tolist()}",
                stacklevel=2,
            )
            ids, y, t, observed = ids[keep], y[keep], t[keep], observed[keep]
        for i in range(y.shape[0]):
            ti = t[i, observed[i]]
            if not np.all(np.diff(ti) > 0):
                raise ValueError(
                    f"observed times not strictly increasing for id {ids[i]!r}"
                )
        for name, arr in (("ids", ids), ("outcomes", y), ("times", t)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_excluded", self.n_excluded + n_dropped)

    @property
    def n_individuals(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_waves(self) -> int:
        return self.outcomes.shape[1]

    @property
    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.outcomes)

    def n_observations(self) -> int:
        return int(self.observed_mask.sum())

    def wave_mean_schedule(self) -> Schedule:
        """Per-wave average of the observed measurement times."""
        mask = self.observed_mask
        counts = mask.sum(axis=0)
        if np.any(counts == 0):
            raise ValueError("some waves have no observed times")
        sums = np.where(mask, self.times, 0.0).sum(axis=0)
        return Schedule(sums / counts)

    def subset_waves(self, wave_index) -> "LongitudinalSample":
        wave_index = np.asarray(wave_index)
        return LongitudinalSample(
            ids=self.ids,
            outcomes=self.outcomes[:, wave_index],
            times=self.times[:, wave_index],
        )


@dataclass(frozen=True)
class ImpliedMoments:
    """Model-implied mean vector and covariance for one schedule."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("cov must be square and match the mean length")
        for name, arr in (("mean", mean), ("cov", cov)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def implied_moments(
    form: FunctionalForm, params: ParameterSet, schedule: Schedule
) -> ImpliedMoments:
    """mean = Lambda mu, cov = Lambda Psi Lambda' + residual_var * I."""
    params.validate_for(form, n_waves=schedule.n_waves)
    lam = _loading_block(form, params, schedule.times[None, :])[0]
    mean = lam @ params.growth_means
    cov = lam @ params.growth_cov @ lam.T
    cov[np.diag_indices_from(cov)] += params.residual_var
    return ImpliedMoments(mean=mean, cov=cov)


class _RawParams(NamedTuple):
    """Parameter pieces in the shape the evaluation core wants (the growth
    covariance as a square-root factor)."""

    growth_means: np.ndarray
    psi_factor: np.ndarray
    residual_var: float
    gamma: np.ndarray | None = None
    b: float | None = None
    c: float | None = None


def _raw_from_params(params: ParameterSet) -> _RawParams:
    return _RawParams(
        growth_means=params.growth_means,
        psi_factor=_cov_sqrt(params.growth_cov),
        residual_var=params.residual_var,
        gamma=params.gamma,
        b=params.b,
        c=params.c,
    )


class _Group(NamedTuple):
    wave_index: np.ndarray
    idx: np.ndarray
    outcomes: np.ndarray
    times: np.ndarray


def _sample_groups(sample) -> list[_Group]:
    """Individuals grouped by observation pattern (cached on the sample)."""
    cached = getattr(sample, "_groups", None)
    if cached is not None:
        return cached
    mask = sample.observed_mask
    by_pattern = {}
    for i in range(mask.shape[0]):
        by_pattern.setdefault(mask[i].tobytes(), []).append(i)
    groups = []
    for key in sorted(by_pattern):
        idx = np.array(by_pattern[key], dtype=int)
        wave_index = np.flatnonzero(np.frombuffer(key, dtype=bool))
        groups.append(
            _Group(
                wave_index=wave_index,
                idx=idx,
                outcomes=np.ascontiguousarray(sample.outcomes[np.ix_(idx, wave_index)]),
                times=np.ascontiguousarray(sample.times[np.ix_(idx, wave_index)]),
            )
        )
    object.__setattr__(sample, "_groups", groups)
    return groups


def _logdet_and_solve(core, w):
    """log|core| and core^-1 w for a batch of small SPD matrices (k <= 3),
    via closed-form determinants/inverses; raises on non-positive
    determinants (numerically breached positive definiteness)."""
    k = core.shape[-1]
    if k == 1:
        det = core[:, 0, 0]
        if np.any(det <= 0):
            raise np.linalg.LinAlgError("non-positive 1x1 core")
        return np.log(det), w / det[:, None]
    if k == 2:
        a, b_, d = core[:, 0, 0], core[:, 0, 1], core[:, 1, 1]
        det = a * d - b_ * b_
        if np.any(det <= 0) or np.any(a <= 0):
            raise np.linalg.LinAlgError("non-positive 2x2 core")
        u = np.empty_like(w)
        u[:, 0] = (d * w[:, 0] - b_ * w[:, 1]) / det
        u[:, 1] = (a * w[:, 1] - b_ * w[:, 0]) / det
        return np.log(det), u
    if k == 3:
        a, b_, c_ = core[:, 0, 0], core[:, 0, 1], core[:, 0, 2]
        d, e = core[:, 1, 1], core[:, 1, 2]
        f = core[:, 2, 2]
        ca = d * f - e * e
        cb = c_ * e - b_ * f
        cc = b_ * e - c_ * d
        det = a * ca + b_ * cb + c_ * cc
        if np.any(det <= 0) or np.any(a <= 0) or np.any(ca <= 0):
            raise np.linalg.LinAlgError("non-positive 3x3 core")
        cd = a * f - c_ * c_
        ce = b_ * c_ - a * e
        cf = a * d - b_ * b_
        u = np.empty_like(w)
        u[:, 0] = ca * w[:, 0] + cb * w[:, 1] + cc * w[:, 2]
        u[:, 1] = cb * w[:, 0] + cd * w[:, 1] + ce * w[:, 2]
        u[:, 2] = cc * w[:, 0] + ce * w[:, 1] + cf * w[:, 2]
        u /= det[:, None]
        return np.log(det), u
    logdet = 2.0 * np.sum(
        np.log(np.einsum("ijj->ij", np.linalg.cholesky(core))), axis=1
    )
    return logdet, np.linalg.solve(core, w[:, :, None])[:, :, 0]


#: beyond this signal-to-residual ratio the low-rank quadratic form loses
#: too many digits to cancellation; switch to the dense factorization
_LOW_RANK_LIMIT = 1e5


def _group_loglik(form, raw: _RawParams, group: _Group, ids):
    """Log-likelihood contributions for one observation-pattern group."""
    theta = raw.residual_var
    n_obs = group.wave_index.shape[0]
    k = raw.growth_means.shape[0]
    lam = _loading_block(form, raw, group.times, wave_index=group.wave_index)
    with np.errstate(over="ignore", invalid="ignore"):
        low_rank = lam @ raw.psi_factor  # (m, J, k)
        resid = group.outcomes - lam @ raw.growth_means
        signal = np.einsum("ijk,ijk->i", low_rank, low_rank)
    finite = np.isfinite(signal)
    if not np.all(finite):
        bad = group.idx[~finite][0]
        raise SingularCovarianceError(ids[bad], "non-finite covariance")
    guard = n_obs + signal / theta
    if np.any(guard > CONDITION_BOUND):
        bad = group.idx[np.argmax(guard)]
        raise SingularCovarianceError(
            ids[bad], f"condition bound {CONDITION_BOUND:g} exceeded"
        )
    if np.max(signal) / theta > _LOW_RANK_LIMIT:
        # orthogonal split of the residual into the factor span and its
        # complement: no term mixes the theta and signal scales, so the
        # evaluation stays accurate however small theta gets
        q, rmat = np.linalg.qr(low_rank)
        a = np.einsum("ijk,ij->ik", q, resid)
        r_perp = resid - np.einsum("ijk,ik->ij", q, a)
        core = rmat @ rmat.transpose(0, 2, 1)
        core[:, np.arange(k), np.arange(k)] += theta
        try:
            logdet_core, solved = _logdet_and_solve(core, a)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(ids[group.idx[0]]) from None
        quad = np.einsum("ij,ij->i", r_perp, r_perp) / theta + np.einsum(
            "ik,ik->i", a, solved
        )
        logdet = (n_obs - k) * np.log(theta) + logdet_core
        return -0.5 * (n_obs * LOG_2PI + logdet + quad)
    core = low_rank.transpose(0, 2, 1) @ low_rank
    core[:, np.arange(k), np.arange(k)] += theta
    w = np.einsum("ijk,ij->ik", low_rank, resid)
    try:
        logdet_core, solved = _logdet_and_solve(core, w)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(ids[group.idx[0]]) from None
    quad = (np.einsum("ij,ij->i", resid, resid) - np.einsum("ik,ik->i", w, solved)) / theta
    logdet = (n_obs - k) * np.log(theta) + logdet_core
    return -0.5 * (n_obs * LOG_2PI + logdet + quad)


def _loglik_raw(form, raw: _RawParams, sample, per_individual=False):
    groups = _sample_groups(sample)
    if per_individual:
        out = np.empty(sample.n_individuals)
        for group in groups:
            out[group.idx] = _group_loglik(form, raw, group, sample.ids)
        return out
    total = 0.0
    for group in groups:
        total += float(np.sum(_group_loglik(form, raw, group, sample.ids)))
    return total


def loglik_by_individual(
    form: FunctionalForm, params: ParameterSet, sample: LongitudinalSample
) -> np.ndarray:
    """Per-individual FIML log-likelihood contributions, in sample order."""
    params.validate_for(form, n_waves=sample.n_waves)
    return _loglik_raw(form, _raw_from_params(params), sample, per_individual=True)


def loglik(
    form: FunctionalForm, params: ParameterSet, sample: LongitudinalSample
) -> float:
    """FIML log-likelihood, including the -J_i/2 log(2 pi) constants so the
    value is an absolute multivariate-normal log-density."""
    params.validate_for(form, n_waves=sample.n_waves)
    return _loglik_raw(form, _raw_from_params(params), sample)


def loglik_gradient(
    form: FunctionalForm,
    params: ParameterSet,
    sample: LongitudinalSample,
    step_floor: float = 1e-6,
    step_rel: float = 1e-7,
) -> np.ndarray:
    """Central-difference gradient of the log-likelihood over the internal
    (unconstrained) parameterization, step max(step_floor, step_rel*|x|).

    Requires an interior parameter point (positive definite growth
    covariance).  Numeric failures inside an evaluation propagate.
    """
    from .parameterization import (
        central_gradient,
        internal_loglik_fn,
        natural_to_internal,
        pack_natural,
    )

    x = natural_to_internal(form, pack_natural(form, params), sample.n_waves)
    fun = internal_loglik_fn(form, sample)
    return central_gradient(fun, x, floor=step_floor, rel=step_rel)
