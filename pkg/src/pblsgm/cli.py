"""Command line: ``pblsgm fit | compare | simulate``.

Exit codes: 0 success (for ``fit``, converged and proper), 2 converged but
improper, 1 any failure including usage errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, report
from .estimation import DegenerateData, NonConvergence, fit
from .simulation import ConditionFailure, condition_grid, run_condition

log = logging.getLogger("pblsgm")

EXIT_OK, EXIT_FAIL, EXIT_IMPROPER = 0, 1, 2

HINTS = {
    "full": "try --model reduced (knot variances fixed at zero) or --model mixed",
    "mixed": "try --model reduced",
    "univariate-random": "try --model univariate-fixed",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def _load_data(args) -> io.WideDataset:
    if getattr(args, "long", False):
        with open(args.data, newline="", encoding="utf-8") as fh:
            return io.long_to_wide(fh, args.data)
    return io.load_wide_csv(args.data)


def _config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.RunConfig()
    changes = {}
    if getattr(args, "model", None):
        changes["model"] = args.model
    if getattr(args, "out", None):
        changes["out"] = args.out
    if getattr(args, "seed", None) is not None:
        changes["options"] = replace(cfg.options, seed=args.seed)
    return replace(cfg, **changes)


def _time_grid(data: io.WideDataset, points: int = 101) -> np.ndarray:
    t = np.concatenate([r.times[r.mask.any(axis=0)] for r in data.records])
    return np.linspace(t.min(), t.max(), points)


def _fit_one(model: str, data: io.WideDataset, cfg: io.RunConfig):
    spec, sub = io.build_spec(model, data, cfg)
    return fit(sub.records, spec, cfg.options), sub


def cmd_fit(args) -> int:
    cfg = _config(args)
    if args.print_config:
        sys.stdout.write(io.render_config(cfg))
        return EXIT_OK
    if not args.data:
        log.error("--data is required")
        return EXIT_FAIL
    data = _load_data(args)
    names = cfg.outcome_names[: len(data.outcomes)]
    try:
        result, sub = _fit_one(cfg.model, data, cfg)
    except NonConvergence as exc:
        log.error("%s: %s; %s", cfg.model, exc, HINTS.get(cfg.model, "try different start values via seed"))
        if exc.result is not None:
            report.write_fit_outputs(exc.result, cfg.out, names, cfg.model)
        return EXIT_FAIL
    except (DegenerateData, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    if cfg.model.startswith("univariate"):
        names = (dict(zip(("y", "z"), cfg.outcome_names)).get(cfg.outcome, cfg.outcome),)
    report.write_fit_outputs(result, cfg.out, names, cfg.model, _time_grid(sub))
    sys.stdout.write(report.fit_report_text(result, names, cfg.model))
    if not result.proper:
        log.warning("solution is improper; %s", HINTS.get(cfg.model, "consider a simpler model"))
        return EXIT_IMPROPER
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    data = _load_data(args)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    bad = [m for m in models if m not in io.MODELS]
    if bad:
        log.error("unknown model(s): %s; choose from %s", ", ".join(bad), ", ".join(io.MODELS))
        return EXIT_FAIL
    rows = []
    for m in models:
        try:
            res, _ = _fit_one(m, data, cfg)
            status = "converged" + ("" if res.proper else ", improper")
            rows.append({"model": m, "n_params": res.n_params, "minus2ll": res.minus2ll, "aic": res.aic,
                         "bic": res.bic, "status": status})
        except (NonConvergence, DegenerateData, ValueError) as exc:
            rows.append({"model": m, "n_params": 0, "minus2ll": float("nan"), "aic": float("nan"),
                         "bic": float("nan"), "status": f"failed: {exc}"})
    text = report.comparison_table(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(text, encoding="utf-8")
        report.write_json(out / "comparison.json", sorted(rows, key=lambda r: r["model"]))
    return EXIT_OK if any(r["status"].startswith("converged") for r in rows) else EXIT_FAIL


def cmd_simulate(args) -> int:
    if args.grid:
        conditions = condition_grid()
        if args.list:
            for c in conditions:
                print(c.label)
            return EXIT_OK
    else:
        try:
            conditions = [io.load_condition(args.condition)]
        except ValueError as exc:
            log.error("invalid condition: %s", exc)
            return EXIT_FAIL
    reps = 1000 if args.full_reproduction else args.reps
    results = []
    for i, c in enumerate(conditions):
        log.info("condition %d/%d: %s (S=%d)", i + 1, len(conditions), c.label, reps)
        try:
            results.append(run_condition(c, reps, seed=args.seed + i, workers=args.workers))
        except ConditionFailure as exc:
            log.error("%s", exc)
            return EXIT_FAIL
    report.write_simulation_outputs(results, args.out)
    for r in results:
        sys.stdout.write(report.simulation_report_text(r))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pblsgm", description="Parallel bilinear spline growth models with unknown random knots.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit one model to a wide CSV file")
    f.add_argument("--data", help="wide CSV: id, t1..tJ, y1..yJ[, z1..zJ]")
    f.add_argument("--long", action="store_true", help="input is long format: id,wave,t,y[,z]")
    f.add_argument("--config", help="flat key = value configuration file")
    f.add_argument("--model", choices=io.MODELS)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", help="output directory")
    f.add_argument("--print-config", action="store_true", help="print every setting with its value and exit")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("compare", help="fit several models and rank them by BIC")
    c.add_argument("--data", required=True)
    c.add_argument("--long", action="store_true")
    c.add_argument("--config")
    c.add_argument("--models", default="linear,quadratic,reduced,full")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("simulate", help="Monte Carlo study of the full and reduced models")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", action="store_true", help="all 108 design conditions")
    g.add_argument("--condition", help="key = value file: n, n_waves, knot_y, knot_z, rho, scenario, resid_var")
    s.add_argument("--list", action="store_true", help="with --grid: list conditions and exit")
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--full-reproduction", action="store_true", help="use S = 1000 replications")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="pblsgm-sim")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
