"""Functional forms, parameter sets, schedules, and loading matrices.

A trajectory model is identified by a functional form (latent basis,
quadratic, negative exponential, or Jenss-Bayley) together with a framework:

* ``LGCM`` -- growth-curve framework; loadings are the closed-form basis
  functions evaluated at each measurement time.
* ``LCSM`` -- change-score framework; loadings accumulate interval-specific
  change, where the change in an interval is the rate-of-change at the
  interval midpoint times the interval length.  For the latent basis form
  the rate in interval j is ``gamma[j-1] * eta1`` and is exact; for the
  parametric forms the midpoint rate is an approximation that becomes exact
  when the rate is linear in time (the quadratic form).

All containers are immutable after construction and every operation here is
a pure function, so they are safe to share across workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Kind",
    "Framework",
    "FunctionalForm",
    "ParameterSet",
    "Schedule",
    "LoadingMatrix",
    "build_loading_matrix",
    "instantaneous_rate",
]


class Kind(enum.Enum):
    NONPARAMETRIC = "nonparametric"
    QUADRATIC = "quadratic"
    NEGATIVE_EXPONENTIAL = "negative_exponential"
    JENSS_BAYLEY = "jenss_bayley"


class Framework(enum.Enum):
    LCSM = "lcsm"
    LGCM = "lgcm"


#: number of growth factors per functional form
N_FACTORS = {
    Kind.NONPARAMETRIC: 2,
    Kind.QUADRATIC: 3,
    Kind.NEGATIVE_EXPONENTIAL: 2,
    Kind.JENSS_BAYLEY: 3,
}


@dataclass(frozen=True)
class FunctionalForm:
    """Which trajectory family is being modeled and in which framework."""

    kind: Kind
    framework: Framework = Framework.LCSM

    def __post_init__(self):
        if not isinstance(self.kind, Kind):
            raise TypeError(f"kind must be a Kind, got {self.kind!r}")
        if not isinstance(self.framework, Framework):
            raise TypeError(f"framework must be a Framework, got {self.framework!r}")
        if self.kind is Kind.NONPARAMETRIC and self.framework is Framework.LGCM:
            raise ValueError(
                "the nonparametric (latent basis) form is supported only in the "
                "change-score framework"
            )

    @property
    def n_factors(self) -> int:
        return N_FACTORS[self.kind]

    def describe(self) -> str:
        return f"{self.kind.value}/{self.framework.value}"


def _as_readonly(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ParameterSet:
    """Growth-factor means/covariance, residual variance, and form extras.

    ``gamma`` is the full vector of relative rates (one per interval,
    ``gamma[0]`` fixed at 1 for identification) and is only meaningful for
    the nonparametric form.  ``b`` (> 0) and ``c`` (< 0) are the fixed rate
    coefficients of the negative exponential and Jenss-Bayley forms.
    """

    growth_means: np.ndarray
    growth_cov: np.ndarray
    residual_var: float
    gamma: np.ndarray | None = None
    b: float | None = None
    c: float | None = None

    def __post_init__(self):
        means = _as_readonly(np.atleast_1d(self.growth_means))
        cov = _as_readonly(np.atleast_2d(self.growth_cov))
        object.__setattr__(self, "growth_means", means)
        object.__setattr__(self, "growth_cov", cov)
        if self.gamma is not None:
            object.__setattr__(self, "gamma", _as_readonly(np.atleast_1d(self.gamma)))
        k = means.shape[0]
        if cov.shape != (k, k):
            raise ValueError(f"growth_cov must be {k}x{k}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
            raise ValueError("growth_cov must be symmetric")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.min(np.linalg.eigvalsh(cov)) < -1e-10 * scale:
            raise ValueError("growth_cov must be positive semi-definite")
        if not self.residual_var > 0:
            raise ValueError("residual_var must be positive")
        if self.gamma is not None and self.gamma[0] != 1.0:
            raise ValueError("gamma[0] must be fixed at 1")
        if self.b is not None and not self.b > 0:
            raise ValueError("b must be positive")
        if self.c is not None and not self.c < 0:
            raise ValueError("c must be negative")

    @property
    def n_factors(self) -> int:
        return self.growth_means.shape[0]

    def validate_for(self, form: FunctionalForm, n_waves: int | None = None) -> None:
        """Check that the fields present match the functional form."""
        if self.n_factors != form.n_factors:
            raise ValueError(
                f"{form.describe()} needs {form.n_factors} growth factors, "
                f"got {self.n_factors}"
            )
        if form.kind is Kind.NONPARAMETRIC:
            if self.gamma is None:
                raise ValueError("nonparametric form requires a gamma vector")
            if n_waves is not None and self.gamma.shape[0] != n_waves - 1:
                raise ValueError(
                    f"gamma must have one entry per interval "
                    f"({n_waves - 1}), got {self.gamma.shape[0]}"
                )
        elif self.gamma is not None:
            raise ValueError("gamma is only valid for the nonparametric form")
        if form.kind is Kind.NEGATIVE_EXPONENTIAL and self.b is None:
            raise ValueError("negative exponential form requires b")
        if form.kind is not Kind.NEGATIVE_EXPONENTIAL and self.b is not None:
            raise ValueError("b is only valid for the negative exponential form")
        if form.kind is Kind.JENSS_BAYLEY and self.c is None:
            raise ValueError("Jenss-Bayley form requires c")
        if form.kind is not Kind.JENSS_BAYLEY and self.c is not None:
            raise ValueError("c is only valid for the Jenss-Bayley form")


@dataclass(frozen=True)
class Schedule:
    """A strictly increasing vector of measurement times.

    Interval midpoints are recomputed on construction so they can never be
    inconsistent with the times.
    """

    times: np.ndarray
    midpoints: np.ndarray = field(init=False)

    def __post_init__(self):
        times = _as_readonly(np.atleast_1d(self.times))
        if times.ndim != 1 or times.shape[0] < 2:
            raise ValueError("a schedule needs at least two measurement times")
        if not np.all(np.diff(times) > 0):
            raise ValueError("measurement times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(
            self, "midpoints", _as_readonly((times[1:] + times[:-1]) / 2.0)
        )

    @property
    def n_waves(self) -> int:
        return self.times.shape[0]

    @property
    def intervals(self) -> np.ndarray:
        return self.times[1:] - self.times[:-1]


@dataclass(frozen=True)
class LoadingMatrix:
    """Per-individual factor loadings (n_waves x n_factors)."""

    values: np.ndarray

    def __post_init__(self):
        values = _as_readonly(np.atleast_2d(self.values))
        if not np.all(values[:, 0] == 1.0):
            raise ValueError("intercept loadings (first column) must all be 1")
        object.__setattr__(self, "values", values)

    @property
    def n_waves(self) -> int:
        return self.values.shape[0]

    @property
    def n_factors(self) -> int:
        return self.values.shape[1]


def _cov_sqrt(cov):
    """Symmetric square root usable for sampling from any PSD covariance
    (an all-zero covariance maps draws to the mean exactly)."""
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        return np.zeros_like(cov)
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _rate_basis(form, params, midpoints, interval_waves=None):
    """Basis of the rate-of-change in each interval w.r.t. the non-intercept
    growth factors.

    ``midpoints`` has shape (..., m).  For the nonparametric form the rate is
    interval-indexed rather than time-indexed, so ``interval_waves`` gives the
    1-based wave each interval ends at (defaults to 2..m+1, the complete
    schedule); entry j then picks ``gamma[interval_waves[j] - 2]``.

    Returns an array of shape (..., m, n_factors - 1).
    """
    midpoints = np.asarray(midpoints, dtype=float)
    m = midpoints.shape[-1]
    kind = form.kind
    if kind is Kind.NONPARAMETRIC:
        if interval_waves is None:
            interval_waves = np.arange(2, m + 2)
        g = params.gamma[np.asarray(interval_waves) - 2]
        return np.broadcast_to(g, midpoints.shape)[..., None]
    if kind is Kind.QUADRATIC:
        return np.stack([np.ones_like(midpoints), 2.0 * midpoints], axis=-1)
    if kind is Kind.NEGATIVE_EXPONENTIAL:
        return (params.b * np.exp(-params.b * midpoints))[..., None]
    if kind is Kind.JENSS_BAYLEY:
        return np.stack(
            [np.ones_like(midpoints), params.c * np.exp(params.c * midpoints)], axis=-1
        )
    raise ValueError(f"unknown kind {kind}")


def _loading_block(form, params, times, wave_index=None):
    """Loadings for a batch of individuals sharing an observation pattern.

    Parameters
    ----------
    times : ndarray, shape (m, J)
        Measurement times, one row per individual.
    wave_index : ndarray of int, optional
        0-based positions of these J observed waves within the full design;
        needed so the nonparametric form picks the right relative rate when
        waves are missing.  Defaults to 0..J-1.

    Returns
    -------
    ndarray, shape (m, J, n_factors)
    """
    times = np.atleast_2d(np.asarray(times, dtype=float))
    m, n_waves = times.shape
    k = form.n_factors
    lam = np.empty((m, n_waves, k))
    lam[:, :, 0] = 1.0
    if form.framework is Framework.LGCM:
        if form.kind is Kind.QUADRATIC:
            lam[:, :, 1] = times
            lam[:, :, 2] = times**2
        elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
            lam[:, :, 1] = 1.0 - np.exp(-params.b * times)
        elif form.kind is Kind.JENSS_BAYLEY:
            lam[:, :, 1] = times
            lam[:, :, 2] = np.exp(params.c * times) - 1.0
        else:  # pragma: no cover - blocked by FunctionalForm
            raise ValueError("nonparametric form has no growth-curve loadings")
        return lam
    dt = np.diff(times, axis=1)
    mid = (times[:, 1:] + times[:, :-1]) / 2.0
    interval_waves = None
    if wave_index is not None:
        interval_waves = np.asarray(wave_index)[1:] + 1
    basis = _rate_basis(form, params, mid, interval_waves)
    lam[:, 0, 1:] = 0.0
    np.cumsum(basis * dt[:, :, None], axis=1, out=lam[:, 1:, 1:])
    return lam


def build_loading_matrix(
    form: FunctionalForm, params: ParameterSet, schedule: Schedule
) -> LoadingMatrix:
    """Construct the loading matrix for one individual's schedule.

    Change-score rows are cumulative: row j is row j-1 plus the interval-j
    increment (rate basis at the interval midpoint times the interval
    length).  Growth-curve rows evaluate the closed-form basis at each time.
    """
    if schedule.n_waves < 3:
        raise ValueError("loading construction expects at least 3 waves")
    params.validate_for(form, n_waves=schedule.n_waves)
    return LoadingMatrix(_loading_block(form, params, schedule.times[None, :])[0])


def instantaneous_rate(
    form: FunctionalForm, factors, params: ParameterSet, t
):
    """Instantaneous rate-of-change of a parametric trajectory at time t.

    ``factors`` is one individual's growth-factor vector.  The nonparametric
    form is rejected: its rate is defined per interval, not per time point.
    """
    if form.kind is Kind.NONPARAMETRIC:
        raise ValueError(
            "the nonparametric form has interval-wise rates, not a pointwise rate"
        )
    factors = np.asarray(factors, dtype=float)
    if factors.shape[-1] != form.n_factors:
        raise ValueError(
            f"expected {form.n_factors} growth factors, got {factors.shape[-1]}"
        )
    t = np.asarray(t, dtype=float)
    if form.kind is Kind.QUADRATIC:
        out = factors[..., 1] + 2.0 * factors[..., 2] * t
    elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
        out = params.b * factors[..., 1] * np.exp(-params.b * t)
    else:
        out = factors[..., 1] + params.c * factors[..., 2] * np.exp(params.c * t)
    return out if out.ndim else float(out)
