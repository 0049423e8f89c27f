"""Monte Carlo harness: data generation over a design grid and the
bias / SE / RMSE / coverage metrics used to evaluate the estimators.

Replication RNG streams come from a counter-based generator keyed by
(design seed, replication index), so replication r is reproducible on its
own, regardless of execution order or worker count.  Metric aggregation is
done over replications sorted by index, which makes study output
bit-identical for a fixed design and seed.

One generation detail: post-baseline measurement times are drawn uniformly
in a window around each design wave, while the first wave is kept at its
design time.  Jittering the baseline would redefine what the change-score
intercept measures (status at the individual's first occasion, not at the
design origin) and would break the exact quadratic agreement between the
two frameworks that the harness checks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .estimation import FitConfig, FitStatus, fit
from .forms import Framework, FunctionalForm, Kind, ParameterSet, _cov_sqrt, _loading_block
from .moments import LongitudinalSample
from .parameterization import free_param_names, pack_natural

__all__ = [
    "WAVES_6_EQUAL",
    "WAVES_10_EQUAL",
    "WAVES_10_UNEQUAL",
    "SimulationDesign",
    "MetricRow",
    "MetricSummary",
    "generate_dataset",
    "compute_metrics",
    "run_study",
    "preset_design",
    "preset_names",
]

WAVES_6_EQUAL = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
WAVES_10_EQUAL = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0)
WAVES_10_UNEQUAL = (0.0, 0.75, 1.5, 2.25, 3.0, 3.75, 4.5, 6.0, 7.5, 9.0)

_WAVE_TOKENS = {"w6": WAVES_6_EQUAL, "w10": WAVES_10_EQUAL, "w10u": WAVES_10_UNEQUAL}

GAMMA_PATTERNS = {
    (6, "dec"): (1.0, 0.8, 0.6, 0.4, 0.2),
    (6, "inc"): (1.0, 1.2, 1.4, 1.6, 1.8),
    (10, "dec"): (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2),
    (10, "inc"): (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8),
}


@dataclass(frozen=True)
class SimulationDesign:
    """One cell of the simulation grid.

    Growth factors are multivariate normal with the given means and SDs and
    a common pairwise correlation ``rho``; measurement times are the design
    waves with uniform(-jitter, +jitter) individual disturbances on the
    post-baseline waves.
    """

    kind: Kind
    n: int
    waves: tuple
    growth_means: tuple
    growth_sds: tuple
    rho: float = 0.3
    jitter: float = 0.25
    residual_var: float = 1.0
    gamma: tuple | None = None
    b: float | None = None
    c: float | None = None
    replications: int = 1000
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if len(self.growth_means) != len(self.growth_sds):
            raise ValueError("growth_means and growth_sds must match in length")
        if self.kind is Kind.NONPARAMETRIC:
            if self.gamma is None or len(self.gamma) != len(self.waves) - 1:
                raise ValueError("nonparametric design needs one gamma per interval")
            if self.gamma[0] != 1.0:
                raise ValueError("gamma[0] must be 1")
        if self.kind is Kind.NEGATIVE_EXPONENTIAL and self.b is None:
            raise ValueError("negative exponential design needs b")
        if self.kind is Kind.JENSS_BAYLEY and self.c is None:
            raise ValueError("Jenss-Bayley design needs c")
        if self.n < 1 or self.replications < 1:
            raise ValueError("n and replications must be positive")
        if not np.all(np.diff(self.waves) > 0):
            raise ValueError("design waves must be strictly increasing")

    @property
    def n_waves(self) -> int:
        return len(self.waves)

    def parameter_set(self) -> ParameterSet:
        sds = np.asarray(self.growth_sds, dtype=float)
        cov = self.rho * np.outer(sds, sds)
        np.fill_diagonal(cov, sds**2)
        kwargs = {}
        if self.kind is Kind.NONPARAMETRIC:
            kwargs["gamma"] = np.asarray(self.gamma, dtype=float)
        elif self.kind is Kind.NEGATIVE_EXPONENTIAL:
            kwargs["b"] = self.b
        elif self.kind is Kind.JENSS_BAYLEY:
            kwargs["c"] = self.c
        return ParameterSet(
            growth_means=np.asarray(self.growth_means, dtype=float),
            growth_cov=cov,
            residual_var=self.residual_var,
            **kwargs,
        )

    def generating_form(self) -> FunctionalForm:
        """Data are generated from the growth-curve basis for parametric
        forms and from the change-score basis for the latent basis form."""
        if self.kind is Kind.NONPARAMETRIC:
            return FunctionalForm(self.kind, Framework.LCSM)
        return FunctionalForm(self.kind, Framework.LGCM)

    def fitted_form(self, target: str) -> FunctionalForm:
        return FunctionalForm(self.kind, Framework(target))


def _rep_rng(seed, rep_index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(rep_index,))
    return np.random.Generator(np.random.Philox(seed=ss))


def generate_dataset(design: SimulationDesign, rep_index: int):
    """Simulate one replication.

    Returns the sample together with the generating growth-factor draws so
    oracle checks can score recovery against the truth.
    """
    rng = _rep_rng(design.seed, rep_index)
    params = design.parameter_set()
    n, n_waves = design.n, design.n_waves
    k = params.n_factors
    eta = params.growth_means + rng.standard_normal((n, k)) @ _cov_sqrt(params.growth_cov).T
    times = np.empty((n, n_waves))
    times[:, 0] = design.waves[0]
    base = np.asarray(design.waves[1:])
    times[:, 1:] = rng.uniform(base - design.jitter, base + design.jitter, size=(n, n_waves - 1))
    lam = _loading_block(design.generating_form(), params, times)
    y = np.einsum("ijk,ik->ij", lam, eta)
    if design.residual_var > 0:
        y = y + rng.normal(0.0, np.sqrt(design.residual_var), size=(n, n_waves))
    sample = LongitudinalSample(ids=np.arange(1, n + 1), outcomes=y, times=times)
    return sample, eta


@dataclass(frozen=True)
class MetricRow:
    truth: float
    relative_bias: float
    empirical_se: float
    relative_rmse: float
    coverage: float
    mc_se_bias: float


@dataclass(frozen=True)
class MetricSummary:
    target: str
    parameters: dict
    convergence_rate: float
    n_kept: int
    n_attempted: int
    n_discarded: int


def compute_metrics(estimates, lowers, uppers, truth) -> MetricRow:
    """Bias/SE/RMSE/coverage estimators for one parameter.

    relative bias  = sum(est - truth) / (truth * S)
    empirical SE   = sqrt(sum((est - mean)^2) / (S - 1))
    relative RMSE  = sqrt(sum((est - truth)^2) / S) / truth
    coverage       = mean of 1{lower <= truth <= upper}
    MC SE of bias  = sqrt(Var(est) / S)
    """
    estimates = np.asarray(estimates, dtype=float)
    lowers = np.asarray(lowers, dtype=float)
    uppers = np.asarray(uppers, dtype=float)
    s = estimates.shape[0]
    rel_bias = float(np.sum(estimates - truth) / (truth * s))
    emp_se = float(np.sqrt(np.sum((estimates - estimates.mean()) ** 2) / (s - 1))) if s > 1 else 0.0
    rel_rmse = float(np.sqrt(np.sum((estimates - truth) ** 2) / s) / truth)
    coverage = float(np.mean((lowers <= truth) & (truth <= uppers)))
    mc_se_bias = emp_se / np.sqrt(s)
    return MetricRow(
        truth=float(truth),
        relative_bias=rel_bias,
        empirical_se=emp_se,
        relative_rmse=rel_rmse,
        coverage=coverage,
        mc_se_bias=float(mc_se_bias),
    )


def _fit_config_for(design, rep_index, target_pos):
    child = np.random.SeedSequence(
        entropy=design.seed, spawn_key=(rep_index, 1 + target_pos)
    )
    return FitConfig(seed=int(child.generate_state(1, dtype=np.uint64)[0] % 2**63))


def _run_replication(design, rep_index, targets):
    """Generate one dataset and fit every target on it."""
    sample, _ = generate_dataset(design, rep_index)
    out = {}
    for pos, target in enumerate(targets):
        form = design.fitted_form(target)
        try:
            result = fit(form, sample, config=_fit_config_for(design, rep_index, pos))
        except Exception as exc:  # structural failure, counted by the caller
            out[target] = ("error", str(exc), None, None, None)
            continue
        lower, upper = result.ci()
        out[target] = (
            result.status.value,
            result.n_retries_used,
            result.estimates,
            result.se,
            result.minus2ll,
        )
    return rep_index, out


def _worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("LCSM_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def run_study(
    design: SimulationDesign,
    fit_targets=("lcsm",),
    workers: int | None = None,
    keep_replications: bool = False,
):
    """Run the study until ``design.replications`` fully convergent
    replications are collected, then summarize every free parameter.

    A replication is kept when every requested target converges on it;
    non-convergent replications are discarded and regenerated under fresh
    replication indices (the discard count is reported).  The study aborts
    if more than 20% of attempted replications fail structurally.

    Returns a dict target -> MetricSummary, plus the per-replication records
    when ``keep_replications`` is set (target -> list of rows).
    """
    targets = tuple(fit_targets)
    for target in targets:
        design.fitted_form(target)  # validates target/kind combination
    s_needed = design.replications
    truth = pack_natural(design.fitted_form(targets[0]), design.parameter_set())
    names = free_param_names(design.fitted_form(targets[0]), design.n_waves)

    kept = {}
    n_structural = 0
    n_attempted = 0
    next_rep = 0
    max_attempts = max(2 * s_needed, s_needed + 20)
    n_workers = _worker_count(workers)

    def consume(result):
        nonlocal n_structural
        rep_index, per_target = result
        ok = all(per_target[t][0] == FitStatus.CONVERGED.value for t in targets)
        if any(per_target[t][0] == "error" for t in targets):
            n_structural += 1
        if ok:
            kept[rep_index] = per_target

    while len(kept) < s_needed and n_attempted < max_attempts:
        shortfall = s_needed - len(kept)
        batch = list(range(next_rep, next_rep + shortfall))
        next_rep += shortfall
        n_attempted += shortfall
        if n_workers > 1 and len(batch) > 1:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                for result in pool.map(
                    _run_replication,
                    [design] * len(batch),
                    batch,
                    [targets] * len(batch),
                    chunksize=max(1, len(batch) // (4 * n_workers)),
                ):
                    consume(result)
        else:
            for rep in batch:
                consume(_run_replication(design, rep, targets))
        if n_attempted >= 10 and n_structural > 0.2 * n_attempted:
            raise RuntimeError(
                f"aborting design {design.name or design.kind.value}: "
                f"{n_structural}/{n_attempted} replications failed structurally"
            )
    if len(kept) < s_needed:
        raise RuntimeError(
            f"could not reach {s_needed} convergent replications "
            f"in {n_attempted} attempts"
        )

    order = sorted(kept)[:s_needed]
    summaries = {}
    records = {t: [] for t in targets}
    for target in targets:
        est = np.array([kept[r][target][2] for r in order])
        se = np.array([kept[r][target][3] for r in order])
        lower, upper = est - 1.96 * se, est + 1.96 * se
        parameters = {
            name: compute_metrics(est[:, j], lower[:, j], upper[:, j], truth[j])
            for j, name in enumerate(names)
        }
        summaries[target] = MetricSummary(
            target=target,
            parameters=parameters,
            convergence_rate=s_needed / n_attempted,
            n_kept=s_needed,
            n_attempted=n_attempted,
            n_discarded=n_attempted - s_needed,
        )
        if keep_replications:
            for r in order:
                status, retries, est_r, se_r, m2ll = kept[r][target]
                records[target].append(
                    {
                        "replication": r,
                        "status": status,
                        "n_retries": retries,
                        "minus2ll": m2ll,
                        "estimates": dict(zip(names, est_r.tolist())),
                        "se": dict(zip(names, se_r.tolist())),
                    }
                )
    if keep_replications:
        return summaries, records
    return summaries


def _lbgm_design(n, waves, resid, pattern, reps, seed):
    n_waves = len(waves)
    return SimulationDesign(
        kind=Kind.NONPARAMETRIC, n=n, waves=waves,
        growth_means=(50.0, 3.0), growth_sds=(5.0, 1.0),
        residual_var=resid, gamma=GAMMA_PATTERNS[(n_waves, pattern)],
        replications=reps, seed=seed,
    )


def _quad_design(n, waves, resid, reps, seed):
    six = len(waves) == 6
    return SimulationDesign(
        kind=Kind.QUADRATIC, n=n, waves=waves,
        growth_means=(50.0, 16.0 if six else 20.0, -1.5 if six else -1.0),
        growth_sds=(5.0, 1.0, 0.3),
        residual_var=resid, replications=reps, seed=seed,
    )


def _exp_design(n, waves, resid, b, reps, seed):
    return SimulationDesign(
        kind=Kind.NEGATIVE_EXPONENTIAL, n=n, waves=waves,
        growth_means=(50.0, 30.0), growth_sds=(5.0, 3.0),
        residual_var=resid, b=b, replications=reps, seed=seed,
    )


def _jb_design(n, waves, resid, slope, reps, seed):
    big = slope == "s25"
    return SimulationDesign(
        kind=Kind.JENSS_BAYLEY, n=n, waves=waves,
        growth_means=(50.0, 2.5 if big else 1.0, -30.0),
        growth_sds=(5.0, 1.0 if big else 0.4, 3.0),
        residual_var=resid, c=-0.7, replications=reps, seed=seed,
    )


def preset_names() -> list[str]:
    names = []
    for wtok in _WAVE_TOKENS:
        for n in (200, 500):
            for r in (1, 2):
                stem = f"n{n}-{wtok}-r{r}"
                names += [f"lbgm-{stem}-dec", f"lbgm-{stem}-inc", f"quad-{stem}"]
                names += [f"exp-{stem}-b04", f"exp-{stem}-b08"]
                names += [f"jb-{stem}-s25", f"jb-{stem}-s10"]
    return names


def preset_design(name: str, replications: int = 1000, seed: int = 0) -> SimulationDesign:
    """Resolve a condition name like ``lbgm-n500-w10u-r1-dec`` to its design."""
    parts = name.split("-")
    if len(parts) < 4:
        raise ValueError(f"unknown design preset {name!r}")
    form_tok, n_tok, wave_tok, resid_tok = parts[0], parts[1], parts[2], parts[3]
    extra = parts[4] if len(parts) > 4 else None
    if n_tok not in ("n200", "n500") or wave_tok not in _WAVE_TOKENS or resid_tok not in ("r1", "r2"):
        raise ValueError(f"unknown design preset {name!r}")
    n = int(n_tok[1:])
    waves = _WAVE_TOKENS[wave_tok]
    resid = float(resid_tok[1:])
    if form_tok == "lbgm" and extra in ("dec", "inc"):
        design = _lbgm_design(n, waves, resid, extra, replications, seed)
    elif form_tok == "quad" and extra is None:
        design = _quad_design(n, waves, resid, replications, seed)
    elif form_tok == "exp" and extra in ("b04", "b08"):
        design = _exp_design(n, waves, resid, 0.4 if extra == "b04" else 0.8, replications, seed)
    elif form_tok == "jb" and extra in ("s25", "s10"):
        design = _jb_design(n, waves, resid, extra, replications, seed)
    else:
        raise ValueError(f"unknown design preset {name!r}")
    return replace(design, name=name)
