"""Report files for fits, model comparisons and simulation runs.

Rendering only formats fields of :class:`FitResult` and
:class:`ConditionResult`; no statistic is computed here.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimation import FitResult
from .simulation import ConditionResult, rollup


def _fmt(v, digits: int = 4) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return f"{v:.{digits}f}"


def _g(v) -> str:
    """Compact, platform-stable number text for machine-readable files."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return format(float(v), ".10g")


def _star(p) -> str:
    return "*" if p is not None and math.isfinite(p) and p < 0.05 else ""


def display_name(name: str, outcome_names: Sequence[str]) -> str:
    key, rest = name.split(":", 1)
    if key == "yz" and len(outcome_names) == 2:
        return f"{outcome_names[0]}-{outcome_names[1]}:{rest}"
    mapping = dict(zip(("y", "z"), outcome_names))
    return f"{mapping.get(key, key)}:{rest}"


def fit_report_text(result: FitResult, outcome_names: Sequence[str] = ("y", "z"), model: str = "") -> str:
    rows = result.table(original=True)
    means = [r for r in rows if ":mu_" in r["name"]]
    other = [r for r in rows if ":mu_" not in r["name"]]
    level = int(round(result.ci_level * 100))
    head = f"{'parameter':<28}{'estimate':>12}{'SE':>10}{'p':>9}  {f'{level}% CI':>22}"
    out = []
    title = f"Model: {model}" if model else "Model fit"
    out += [title, "=" * len(head)]
    status = "converged" if result.converged else f"not converged ({result.message})"
    out.append(f"status: {status} after {result.attempts_used} attempt(s); n = {result.n}; parameters = {result.n_params}")
    if not result.se_available:
        out.append("standard errors unavailable: the observed information is not positive definite")
    for title, block in (("Panel A: growth factor means", means), ("Panel B: variances and covariances", other)):
        out += ["", title, head, "-" * len(head)]
        for r in block:
            ci = f"({_fmt(r['lower'])}, {_fmt(r['upper'])})"
            out.append(
                f"{display_name(r['name'], outcome_names):<28}{_fmt(r['estimate']):>12}{_fmt(r['se']):>10}"
                f"{_fmt(r['p'], 3):>8}{_star(r['p']):1}  {ci:>22}"
            )
    out += ["", "* p < 0.05 (two-sided Wald test; variance tests ignore the boundary at zero)", ""]
    out += [
        "Fit indices",
        f"  -2 log-likelihood  {result.minus2ll:.2f}",
        f"  AIC                {result.aic:.2f}",
        f"  BIC                {result.bic:.2f}",
        "",
        "Residual variances",
    ]
    out += [f"  {display_name(k, outcome_names):<26}{_fmt(v)}" for k, v in result.residuals.items()]
    out += ["", "Impropriety check"]
    if result.improper.proper:
        out.append("  proper: no negative variance, all correlations within [-1, 1]")
    for name in result.improper.negative_variances:
        out.append(f"  negative variance: {display_name(name, outcome_names)}")
    for a, b, r in result.improper.out_of_range_correlations:
        out.append(f"  correlation out of range: {display_name(a, outcome_names)} with {display_name(b, outcome_names)} = {r:.3f}")
    return "\n".join(out) + "\n"


def fit_summary(result: FitResult, model: str = "") -> dict:
    return {
        "model": model,
        "converged": result.converged,
        "attempts_used": result.attempts_used,
        "message": result.message,
        "n": result.n,
        "n_params": result.n_params,
        "loglik": result.loglik,
        "minus2ll": result.minus2ll,
        "aic": result.aic,
        "bic": result.bic,
        "se_available": result.se_available,
        "proper": result.improper.proper,
        "negative_variances": list(result.improper.negative_variances),
        "out_of_range_correlations": [list(c) for c in result.improper.out_of_range_correlations],
        "residuals": result.residuals,
    }


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True, default=_json_default)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_fit_outputs(result: FitResult, out_dir, outcome_names=("y", "z"), model: str = "", times=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(fit_report_text(result, outcome_names, model), encoding="utf-8")
    write_json(out / "summary.json", fit_summary(result, model))
    with (out / "estimates.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "parameter", "estimate", "se", "lower", "upper", "p"])
        for frame, original in (("original", True), ("reparameterized", False)):
            for r in result.table(original):
                w.writerow([frame, r["name"], _g(r["estimate"]), _g(r["se"]), _g(r["lower"]), _g(r["upper"]), _g(r["p"])])
    if times is not None:
        curves = result.implied_curve(times)
        with (out / "implied_curve.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time"] + [display_name(f"{k}:mean", outcome_names).split(":")[0] for k in curves])
            for i, t in enumerate(times):
                w.writerow([_g(t)] + [_g(c[i]) for c in curves.values()])


def comparison_table(rows: Sequence[dict]) -> str:
    """``rows`` hold model, n_params, minus2ll, aic, bic (and status); sorted by BIC."""
    ordered = sorted(rows, key=lambda r: (not math.isfinite(r["bic"]), r["bic"]))
    head = f"{'model':<20}{'params':>8}{'-2LL':>14}{'AIC':>14}{'BIC':>14}  status"
    out = [head, "-" * len(head)]
    for r in ordered:
        out.append(
            f"{r['model']:<20}{r['n_params']:>8}{_fmt(r['minus2ll'], 2):>14}{_fmt(r['aic'], 2):>14}"
            f"{_fmt(r['bic'], 2):>14}  {r['status']}"
        )
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------
# simulation

METRICS = ("rel_bias", "emp_se", "rel_rmse", "coverage", "mc_se_bias")


def write_simulation_outputs(results: Sequence[ConditionResult], out_dir) -> None:
    """metrics.csv (one row per condition, model and parameter), summary.json and,
    for more than one condition, rollup.csv with median and range per parameter."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "model", "parameter", "true_value", *METRICS, "absolute", "n_reps"])
        for r in results:
            truth = r.condition.truth_by_name()
            for model in ("full", "reduced"):
                for name, m in getattr(r, model).items():
                    w.writerow(
                        [r.condition.label, model, name, _g(truth[name])]
                        + [_g(getattr(m, k)) for k in METRICS]
                        + [int(m.absolute), m.n_reps]
                    )
    write_json(out / "summary.json", {"conditions": [r.to_dict() for r in results]})
    if len(results) > 1:
        with (out / "rollup.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "metric", "parameter", "median", "min", "max"])
            for model in ("full", "reduced"):
                for metric in METRICS:
                    for name, v in rollup(results, model, metric).items():
                        w.writerow([model, metric, name, _g(v["median"]), _g(v["min"]), _g(v["max"])])


def simulation_report_text(result: ConditionResult) -> str:
    c = result.condition
    out = [
        f"Condition {c.label}",
        f"S = {result.S}; datasets generated = {result.datasets_generated}; "
        f"full non-convergent = {result.full_nonconverged}; reduced non-convergent = {result.reduced_nonconverged}",
        f"improper full fits = {result.improper} (negative variance {result.improper_negative_variance}, "
        f"out-of-range correlation {result.improper_out_of_range})",
        "",
        f"{'parameter':<18}{'rel.bias':>10}{'emp.SE':>10}{'rel.RMSE':>10}{'coverage':>10}",
    ]
    for name, m in result.full.items():
        flag = " (absolute)" if m.absolute else ""
        out.append(
            f"{name:<18}{_fmt(m.rel_bias):>10}{_fmt(m.emp_se):>10}{_fmt(m.rel_rmse):>10}{_fmt(m.coverage, 3):>10}{flag}"
        )
    return "\n".join(out) + "\n"
