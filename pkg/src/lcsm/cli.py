"""Command-line front end: dataset ingestion, fit reports, derived-change
export, and Monte Carlo studies.

Datasets are wide CSV, one row per individual, header ``id,y1..yJ,t1..tJ``;
missing outcomes are empty fields or the literal NA, and a time is required
wherever the outcome is present.  Reports and designs are JSON; curves and
scores are CSV for external plotting.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .change import DerivedChange, derived_moments, factor_scores
from .estimation import FitConfig, FitResult, FitStatus, fit
from .forms import Framework, FunctionalForm, Kind, ParameterSet, Schedule
from .moments import LongitudinalSample
from .simulate import SimulationDesign, _WAVE_TOKENS, preset_design, run_study

__all__ = ["load_sample", "RunReport", "cmd_fit", "cmd_derive", "cmd_simulate", "main"]

FORM_TOKENS = {
    "lbgm": Kind.NONPARAMETRIC,
    "quad": Kind.QUADRATIC,
    "exp": Kind.NEGATIVE_EXPONENTIAL,
    "jb": Kind.JENSS_BAYLEY,
}
_KIND_TOKENS = {kind: token for token, kind in FORM_TOKENS.items()}


def load_sample(path, format: str = "wide-csv") -> LongitudinalSample:
    """Read a wide-CSV dataset and validate it into a LongitudinalSample."""
    if format != "wide-csv":
        raise ValueError(f"unsupported format {format!r}")
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0].lower() != "id" or (len(header) - 1) % 2 != 0:
            raise ValueError(f"{path}: header must be id,y1..yJ,t1..tJ")
        n_waves = (len(header) - 1) // 2
        expected = (
            ["id"]
            + [f"y{j}" for j in range(1, n_waves + 1)]
            + [f"t{j}" for j in range(1, n_waves + 1)]
        )
        if [h.lower() for h in header] != expected:
            raise ValueError(
                f"{path}: header must be {','.join(expected)}, got {','.join(header)}"
            )
        ids, ys, ts = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} cells")
            ids.append(row[0].strip())
            ys.append([_parse_cell(cell, path, lineno) for cell in row[1 : 1 + n_waves]])
            ts.append([_parse_cell(cell, path, lineno) for cell in row[1 + n_waves :]])
    if not ids:
        raise ValueError(f"{path}: no data rows")
    return LongitudinalSample(
        ids=np.array(ids), outcomes=np.array(ys), times=np.array(ts)
    )


def _parse_cell(cell, path, lineno):
    cell = cell.strip()
    if cell == "" or cell.upper() == "NA":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None


def _params_to_dict(params: ParameterSet) -> dict:
    out = {
        "growth_means": params.growth_means.tolist(),
        "growth_cov": params.growth_cov.tolist(),
        "residual_var": params.residual_var,
    }
    if params.gamma is not None:
        out["gamma"] = params.gamma.tolist()
    if params.b is not None:
        out["b"] = params.b
    if params.c is not None:
        out["c"] = params.c
    return out


def _params_from_dict(d: dict) -> ParameterSet:
    return ParameterSet(
        growth_means=np.array(d["growth_means"]),
        growth_cov=np.array(d["growth_cov"]),
        residual_var=d["residual_var"],
        gamma=np.array(d["gamma"]) if "gamma" in d else None,
        b=d.get("b"),
        c=d.get("c"),
    )


def _fit_to_dict(result: FitResult) -> dict:
    return {
        "params": _params_to_dict(result.params),
        "free_names": list(result.free_names),
        "estimates": result.estimates.tolist(),
        "se": result.se.tolist(),
        "wald_p": result.wald_p.tolist(),
        "cov": result.cov.tolist(),
        "loglik": result.loglik,
        "minus2ll": result.minus2ll,
        "aic": result.aic,
        "bic": result.bic,
        "n_free": result.n_free,
        "n_individuals": result.n_individuals,
        "n_waves": result.n_waves,
        "status": result.status.value,
        "n_retries_used": result.n_retries_used,
    }


def _fit_from_dict(d: dict, form: FunctionalForm) -> FitResult:
    return FitResult(
        form=form,
        params=_params_from_dict(d["params"]),
        free_names=list(d["free_names"]),
        estimates=np.array(d["estimates"]),
        se=np.array(d["se"]),
        wald_p=np.array(d["wald_p"]),
        cov=np.array(d["cov"]),
        loglik=d["loglik"],
        minus2ll=d["minus2ll"],
        aic=d["aic"],
        bic=d["bic"],
        n_free=d["n_free"],
        n_individuals=d["n_individuals"],
        n_waves=d["n_waves"],
        status=FitStatus(d["status"]),
        n_retries_used=d["n_retries_used"],
    )


def _derived_to_dict(derived: DerivedChange) -> dict:
    return {
        "times": derived.evaluated_at.times.tolist(),
        "rate_mean": derived.rate_mean.tolist(),
        "rate_var": derived.rate_var.tolist(),
        "change_mean": derived.change_mean.tolist(),
        "change_var": derived.change_var.tolist(),
        "cfb_mean": derived.cfb_mean.tolist(),
        "cfb_var": derived.cfb_var.tolist(),
    }


def _derived_from_dict(d: dict) -> DerivedChange:
    return DerivedChange(
        rate_mean=np.array(d["rate_mean"]),
        rate_var=np.array(d["rate_var"]),
        change_mean=np.array(d["change_mean"]),
        change_var=np.array(d["change_var"]),
        cfb_mean=np.array(d["cfb_mean"]),
        cfb_var=np.array(d["cfb_var"]),
        evaluated_at=Schedule(np.array(d["times"])),
    )


@dataclass
class RunReport:
    """Everything a fit run produced, serializable to JSON and back."""

    form: str
    framework: str
    data_path: str
    seed: int
    wall_time_s: float
    fit: FitResult
    derived: DerivedChange | None
    software: str = "lcsm"
    version: str = __version__
    schema_version: int = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "software": self.software,
            "version": self.version,
            "model": {"form": self.form, "framework": self.framework},
            "data_path": self.data_path,
            "seed": self.seed,
            "wall_time_s": self.wall_time_s,
            "fit": _fit_to_dict(self.fit),
            "derived": None if self.derived is None else _derived_to_dict(self.derived),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        form = FunctionalForm(
            FORM_TOKENS[d["model"]["form"]], Framework(d["model"]["framework"])
        )
        return cls(
            form=d["model"]["form"],
            framework=d["model"]["framework"],
            data_path=d["data_path"],
            seed=d["seed"],
            wall_time_s=d["wall_time_s"],
            fit=_fit_from_dict(d["fit"], form),
            derived=None if d["derived"] is None else _derived_from_dict(d["derived"]),
            software=d["software"],
            version=d["version"],
            schema_version=d["schema_version"],
        )

    def functional_form(self) -> FunctionalForm:
        return FunctionalForm(FORM_TOKENS[self.form], Framework(self.framework))

    def save(self, path):
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path) as handle:
            return cls.from_dict(json.load(handle))

    def __eq__(self, other):
        return isinstance(other, RunReport) and self.to_dict() == other.to_dict()


def _print_fit_table(result: FitResult, derived: DerivedChange | None):
    print(f"{'parameter':<12}{'estimate':>14}{'SE':>12}{'p':>10}")
    for name, est, se, p in zip(
        result.free_names, result.estimates, result.se, result.wald_p
    ):
        p_txt = "<0.0001" if p < 1e-4 else f"{p:.4f}"
        print(f"{name:<12}{est:>14.4f}{se:>12.4f}{p_txt:>10}")
    print(
        f"-2ll {result.minus2ll:.4f}  AIC {result.aic:.4f}  BIC {result.bic:.4f}  "
        f"free params {result.n_free}  n {result.n_individuals}"
    )
    print(f"status {result.status.value}  retries used {result.n_retries_used}")
    if derived is not None:
        print()
        print(
            f"{'interval':<9}{'t_mid':>8}{'rate_mean':>12}{'rate_var':>12}"
            f"{'change_mean':>13}{'change_var':>12}{'cfb_mean':>12}{'cfb_var':>12}"
        )
        mids = derived.evaluated_at.midpoints
        for j in range(derived.rate_mean.shape[0]):
            print(
                f"{j + 1:<9}{mids[j]:>8.3f}{derived.rate_mean[j]:>12.4f}"
                f"{derived.rate_var[j]:>12.4f}{derived.change_mean[j]:>13.4f}"
                f"{derived.change_var[j]:>12.4f}{derived.cfb_mean[j]:>12.4f}"
                f"{derived.cfb_var[j]:>12.4f}"
            )


def cmd_fit(args) -> int:
    if args.form not in FORM_TOKENS:
        print(f"error: unknown form {args.form!r}; choose from {sorted(FORM_TOKENS)}",
              file=sys.stderr)
        return 1
    try:
        form = FunctionalForm(FORM_TOKENS[args.form], Framework(args.framework))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        sample = load_sample(args.data)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    start = None
    if args.start:
        with open(args.start) as handle:
            start = _params_from_dict(json.load(handle))
    config = FitConfig(seed=args.seed, max_retries=args.retries)
    t0 = time.perf_counter()
    result = fit(form, sample, config=config, start=start)
    wall = time.perf_counter() - t0
    derived = None
    if result.status is FitStatus.CONVERGED:
        derived = derived_moments(form, result.params, sample.wave_mean_schedule())
    report = RunReport(
        form=args.form, framework=args.framework, data_path=str(args.data),
        seed=args.seed, wall_time_s=wall, fit=result, derived=derived,
    )
    report.save(args.out)
    _print_fit_table(result, derived)
    print(f"report written to {args.out}")
    if result.status is FitStatus.CONVERGED:
        return 0
    if result.status is FitStatus.RETRIES_EXHAUSTED:
        return 2
    return 1


_CURVE_COLUMNS = [
    "wave", "t_ref", "cfb_mean", "cfb_var",
    "interval", "rate_mean", "rate_var", "change_mean", "change_var",
]


def _curve_rows(derived: DerivedChange):
    times = derived.evaluated_at.times
    for j in range(derived.rate_mean.shape[0]):
        yield {
            "wave": j + 2,
            "t_ref": times[j + 1],
            "cfb_mean": derived.cfb_mean[j],
            "cfb_var": derived.cfb_var[j],
            "interval": j + 1,
            "rate_mean": derived.rate_mean[j],
            "rate_var": derived.rate_var[j],
            "change_mean": derived.change_mean[j],
            "change_var": derived.change_var[j],
        }


def cmd_derive(args) -> int:
    try:
        report = RunReport.load(args.report)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read report: {exc}", file=sys.stderr)
        return 1
    if report.fit.status is not FitStatus.CONVERGED:
        print("error: report is not from a converged fit", file=sys.stderr)
        return 1
    form = report.functional_form()
    params = report.fit.params
    sample = None
    if args.schedule == "per-individual" or args.scores:
        data_path = args.data or report.data_path
        try:
            sample = load_sample(data_path)
        except (OSError, ValueError) as exc:
            print(f"error: need the dataset for this output ({exc})", file=sys.stderr)
            return 1
    with open(args.out, "w", newline="") as handle:
        if args.schedule == "wave-mean":
            writer = csv.DictWriter(handle, fieldnames=_CURVE_COLUMNS)
            writer.writeheader()
            derived = report.derived or derived_moments(
                form, params, Schedule(report.derived.evaluated_at.times)
            )
            for row in _curve_rows(derived):
                writer.writerow(row)
        else:
            writer = csv.DictWriter(handle, fieldnames=["id"] + _CURVE_COLUMNS)
            writer.writeheader()
            for i in range(sample.n_individuals):
                obs = sample.observed_mask[i]
                schedule = Schedule(sample.times[i, obs])
                derived = derived_moments(form, params, schedule)
                for row in _curve_rows(derived):
                    writer.writerow({"id": sample.ids[i], **row})
    print(f"curves written to {args.out}")
    if args.scores:
        scores = factor_scores(form, report.fit, sample)
        _write_scores(args.scores, scores)
        print(f"factor scores written to {args.scores}")
    return 0


def _write_scores(path, scores):
    k = scores.eta.shape[1]
    n_waves = scores.cfb.shape[1]
    names = (
        ["id"]
        + [f"eta{i}" for i in range(k)]
        + [f"rate_w{j}" for j in range(2, n_waves + 1)]
        + [f"change_w{j}" for j in range(2, n_waves + 1)]
        + [f"cfb_w{j}" for j in range(1, n_waves + 1)]
        + [f"true_score_w{j}" for j in range(1, n_waves + 1)]
    )

    def cell(value):
        return "" if np.isnan(value) else repr(float(value))

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for i in range(scores.eta.shape[0]):
            row = [scores.ids[i]]
            row += [cell(v) for v in scores.eta[i]]
            row += [cell(v) for v in scores.rate[i]]
            row += [cell(v) for v in scores.interval_change[i]]
            row += [cell(v) for v in scores.cfb[i]]
            row += [cell(v) for v in scores.true_score[i]]
            writer.writerow(row)


def _design_from_dict(d: dict, replications, seed) -> SimulationDesign:
    waves = d["waves"]
    if isinstance(waves, str):
        waves = _WAVE_TOKENS[waves]
    return SimulationDesign(
        kind=FORM_TOKENS[d["form"]],
        n=d["n"],
        waves=tuple(waves),
        growth_means=tuple(d["growth_means"]),
        growth_sds=tuple(d["growth_sds"]),
        rho=d.get("rho", 0.3),
        jitter=d.get("jitter", 0.25),
        residual_var=d.get("residual_var", 1.0),
        gamma=tuple(d["gamma"]) if "gamma" in d else None,
        b=d.get("b"),
        c=d.get("c"),
        replications=replications if replications else d.get("replications", 1000),
        seed=seed if seed is not None else d.get("seed", 0),
        name=d.get("name", ""),
    )


def _design_to_dict(design: SimulationDesign) -> dict:
    out = {
        "form": _KIND_TOKENS[design.kind],
        "n": design.n,
        "waves": list(design.waves),
        "growth_means": list(design.growth_means),
        "growth_sds": list(design.growth_sds),
        "rho": design.rho,
        "jitter": design.jitter,
        "residual_var": design.residual_var,
        "replications": design.replications,
        "seed": design.seed,
        "name": design.name,
    }
    if design.gamma is not None:
        out["gamma"] = list(design.gamma)
    if design.b is not None:
        out["b"] = design.b
    if design.c is not None:
        out["c"] = design.c
    return out


def cmd_simulate(args) -> int:
    from dataclasses import replace

    try:
        if args.design.endswith(".json"):
            with open(args.design) as handle:
                design = _design_from_dict(json.load(handle), args.reps, args.seed)
        else:
            design = preset_design(args.design, replications=args.reps or 1000,
                                   seed=args.seed if args.seed is not None else 0)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: invalid design: {exc}", file=sys.stderr)
        return 1
    targets = tuple(t.strip() for t in args.targets.split(",") if t.strip())
    try:
        summaries, records = run_study(design, fit_targets=targets, keep_replications=True)
    except (RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    payload = {
        "design": _design_to_dict(design),
        "targets": {
            target: {
                "convergence_rate": summary.convergence_rate,
                "n_kept": summary.n_kept,
                "n_attempted": summary.n_attempted,
                "n_discarded": summary.n_discarded,
                "parameters": {
                    name: {
                        "truth": row.truth,
                        "relative_bias": row.relative_bias,
                        "empirical_se": row.empirical_se,
                        "relative_rmse": row.relative_rmse,
                        "coverage": row.coverage,
                        "mc_se_bias": row.mc_se_bias,
                    }
                    for name, row in summary.parameters.items()
                },
            }
            for target, summary in summaries.items()
        },
    }
    with open(args.out, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    audit_path = args.out[:-5] + "_replications.csv" if args.out.endswith(".json") \
        else args.out + "_replications.csv"
    names = next(iter(summaries.values())).parameters.keys()
    with open(audit_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["target", "replication", "status", "n_retries", "minus2ll"]
            + list(names) + [f"se_{n}" for n in names]
        )
        for target in targets:
            for rec in records[target]:
                writer.writerow(
                    [target, rec["replication"], rec["status"], rec["n_retries"],
                     repr(rec["minus2ll"])]
                    + [repr(rec["estimates"][n]) for n in names]
                    + [repr(rec["se"][n]) for n in names]
                )
    for target, summary in summaries.items():
        print(
            f"{target}: {summary.n_kept} convergent replications "
            f"({summary.convergence_rate:.1%} convergence, "
            f"{summary.n_discarded} discarded)"
        )
    print(f"metrics written to {args.out}, replications to {audit_path}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lcsm",
        description="Fit latent change score / growth curve models with "
        "individually varying measurement occasions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model to a wide-CSV dataset")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--form", required=True,
                       help="lbgm | quad | exp | jb")
    p_fit.add_argument("--framework", default="lcsm", choices=["lcsm", "lgcm"])
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--start", default=None,
                       help="JSON file with starting parameter values")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--retries", type=int, default=10)
    p_fit.set_defaults(func=cmd_fit)

    p_der = sub.add_parser("derive", help="export derived change curves")
    p_der.add_argument("--report", required=True)
    p_der.add_argument("--out", required=True)
    p_der.add_argument("--schedule", default="wave-mean",
                       choices=["wave-mean", "per-individual"])
    p_der.add_argument("--scores", default=None,
                       help="also write per-individual factor scores to this CSV")
    p_der.add_argument("--data", default=None,
                       help="dataset path override (defaults to the one in the report)")
    p_der.set_defaults(func=cmd_derive)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    p_sim.add_argument("--design", required=True,
                       help="design JSON path or a preset name like lbgm-n500-w10u-r1-dec")
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--targets", default="lcsm", help="comma list: lcsm,lgcm")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
