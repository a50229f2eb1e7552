"""Wide CSV data files and flat key=value run configuration."""
from __future__ import annotations

import configparser
import csv
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .estimation import FitOptions
from .model import IndividualRecord, ModelSpec, OutcomeSpec, Shape
from .simulation import SimulationCondition

_COLUMN = re.compile(r"^([tyz])(\d+)$")
MODELS = ("full", "reduced", "mixed", "univariate-random", "univariate-fixed", "linear", "quadratic")


class DataError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass
class WideDataset:
    records: list
    n_waves: int
    outcomes: tuple  # outcome column letters present, ("y",) or ("y", "z")

    def __len__(self):
        return len(self.records)

    def select_outcome(self, k: int) -> "WideDataset":
        """Single-outcome view; individuals with no observed cell for it are dropped."""
        recs = []
        for r in self.records:
            if r.mask[k].any():
                recs.append(IndividualRecord(r.id, r.times, r.values[k : k + 1], r.mask[k : k + 1]))
        return WideDataset(recs, self.n_waves, (self.outcomes[k],))


def _number(text: str, line: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"line {line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {line}: column {column!r} is not finite: {text!r}")
    return v


def parse_wide(lines: Iterable[str], source: str = "<input>") -> WideDataset:
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{source}: empty file (a header row is required)") from None
    if not header or header[0].lower() != "id":
        raise DataError(f"{source}: line 1: first column must be 'id'")
    cols: dict[str, dict[int, int]] = {"t": {}, "y": {}, "z": {}}
    for pos, name in enumerate(header[1:], start=1):
        m = _COLUMN.match(name.lower())
        if not m:
            raise DataError(f"{source}: line 1: unrecognized column {name!r} (expected t<j>, y<j> or z<j>)")
        cols[m.group(1)][int(m.group(2))] = pos
    J = len(cols["t"])
    if J == 0 or sorted(cols["t"]) != list(range(1, J + 1)):
        raise DataError(f"{source}: line 1: time columns must be t1..tJ")
    outcomes = tuple(k for k in ("y", "z") if cols[k])
    if "y" not in outcomes:
        raise DataError(f"{source}: line 1: outcome columns y1..yJ are required")
    for k in outcomes:
        if sorted(cols[k]) != list(range(1, J + 1)):
            raise DataError(f"{source}: line 1: outcome {k} needs columns {k}1..{k}{J} to match t1..t{J}")
    records, seen = [], set()
    for row in reader:
        line = reader.line_num
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{source}: line {line}: expected {len(header)} fields, found {len(row)}")
        rid = row[0].strip()
        if not rid:
            raise DataError(f"{source}: line {line}: missing id")
        if rid in seen:
            raise DataError(f"{source}: line {line}: duplicate id {rid!r}")
        seen.add(rid)
        times = np.full(J, np.nan)
        values = np.full((len(outcomes), J), np.nan)
        mask = np.zeros((len(outcomes), J), dtype=bool)
        for j in range(1, J + 1):
            cell = row[cols["t"][j]].strip()
            if cell:
                times[j - 1] = _number(cell, line, f"t{j}")
            for k, key in enumerate(outcomes):
                cell = row[cols[key][j]].strip()
                if not cell:
                    continue
                if np.isnan(times[j - 1]):
                    raise DataError(f"{source}: line {line}: {key}{j} is observed but t{j} is empty")
                values[k, j - 1] = _number(cell, line, f"{key}{j}")
                mask[k, j - 1] = True
        try:
            records.append(IndividualRecord(rid, times, values, mask))
        except ValueError as exc:
            raise DataError(f"{source}: line {line}: {exc}") from None
    if not records:
        raise DataError(f"{source}: no data rows")
    return WideDataset(records, J, outcomes)


def load_wide_csv(path) -> WideDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        return parse_wide(fh, str(path))


def write_wide_csv(path, data: WideDataset) -> None:
    J = data.n_waves
    header = ["id"] + [f"t{j}" for j in range(1, J + 1)]
    for key in data.outcomes:
        header += [f"{key}{j}" for j in range(1, J + 1)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in data.records:
            used = r.mask.any(axis=0)
            row = [r.id] + [repr(float(t)) if used[j] and np.isfinite(t) else "" for j, t in enumerate(r.times)]
            for k in range(len(data.outcomes)):
                row += [repr(float(v)) if r.mask[k, j] else "" for j, v in enumerate(r.values[k])]
            w.writerow(row)


def long_to_wide(lines: Iterable[str], source: str = "<input>") -> WideDataset:
    """Convert ``id,wave,t,y[,z]`` rows (waves numbered from 1) to the wide layout."""
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise DataError(f"{source}: empty file (a header row is required)")
    names = [f.strip().lower() for f in reader.fieldnames]
    if names[:4] != ["id", "wave", "t", "y"] or names[4:] not in ([], ["z"]):
        raise DataError(f"{source}: line 1: long format needs columns id,wave,t,y[,z]")
    outcomes = ("y", "z") if "z" in names else ("y",)
    rows: dict[str, dict[int, list[str]]] = {}
    for row in reader:
        line = reader.line_num
        row = {k.strip().lower(): (v or "").strip() for k, v in row.items()}
        try:
            wave = int(row["wave"])
        except ValueError:
            raise DataError(f"{source}: line {line}: wave must be an integer") from None
        if wave < 1:
            raise DataError(f"{source}: line {line}: waves are numbered from 1")
        cells = rows.setdefault(row["id"], {})
        if wave in cells:
            raise DataError(f"{source}: line {line}: duplicate wave {wave} for id {row['id']!r}")
        cells[wave] = [row["t"]] + [row[k] for k in outcomes]
    if not rows:
        raise DataError(f"{source}: no data rows")
    J = max(max(c) for c in rows.values())
    header = ["id"] + [f"t{j}" for j in range(1, J + 1)]
    for key in outcomes:
        header += [f"{key}{j}" for j in range(1, J + 1)]
    wide = [",".join(header)]
    for rid, cells in rows.items():
        blank = [""] * (1 + len(outcomes))
        per = [cells.get(j, blank) for j in range(1, J + 1)]
        out = [rid] + [p[0] for p in per]
        for k in range(len(outcomes)):
            out += [p[1 + k] for p in per]
        wide.append(",".join(out))
    return parse_wide(wide, source)


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    model: str = "full"
    outcome_names: tuple = ("y", "z")
    random_knot: str = "y"  # outcome that keeps the random knot in the mixed model
    outcome: str = "y"  # outcome used by univariate models
    options: FitOptions = field(default_factory=FitOptions)
    out: str = "pblsgm-out"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.random_knot not in ("y", "z"):
            raise ValueError("random_knot must be y or z (mixed requires exactly one random-knot outcome)")
        if self.outcome not in ("y", "z"):
            raise ValueError("outcome must be y or z")


def _parse_flat(text: str, source: str) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from None
    return dict(cp["run"])


def _bounds(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    if not lo < hi:
        raise ValueError("knot bounds need low < high")
    return lo, hi


def config_from_mapping(values: dict[str, str]) -> RunConfig:
    values = dict(values)
    opts = {}
    casts = {"max_attempts": int, "gtol": float, "max_iter": int, "ci_level": float, "seed": int}
    for key, cast in casts.items():
        if key in values:
            opts[key] = cast(values.pop(key))
    kb = {}
    for key in ("y", "z"):
        v = values.pop(f"knot_bounds_{key}", "").strip()
        if v:
            kb[key] = _bounds(v)
    if kb:
        opts["knot_bounds"] = kb
    cfg = {}
    for key in ("model", "random_knot", "outcome", "out"):
        if key in values:
            cfg[key] = values.pop(key).strip()
    if "outcome_names" in values:
        cfg["outcome_names"] = tuple(s.strip() for s in values.pop("outcome_names").split(",") if s.strip())
    if values:
        raise ValueError(f"unknown configuration key(s): {', '.join(sorted(values))}")
    return RunConfig(options=FitOptions(**opts), **cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    return config_from_mapping(_parse_flat(path.read_text(encoding="utf-8"), str(path)))


def render_config(cfg: RunConfig) -> str:
    """Flat key=value text listing every setting (round-trips through :func:`load_config`)."""
    lines = [
        f"model = {cfg.model}",
        f"outcome_names = {','.join(cfg.outcome_names)}",
        f"random_knot = {cfg.random_knot}",
        f"outcome = {cfg.outcome}",
        f"out = {cfg.out}",
    ]
    for f in fields(FitOptions):
        v = getattr(cfg.options, f.name)
        if f.name == "knot_bounds":
            for key in ("y", "z"):
                b = (v or {}).get(key)
                lines.append(f"knot_bounds_{key} = {'' if b is None else f'{b[0]!r},{b[1]!r}'}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def build_spec(model: str, data: WideDataset, cfg: RunConfig | None = None):
    """Model specification and the (possibly single-outcome) data it applies to."""
    cfg = cfg or RunConfig(model=model)
    J, K = data.n_waves, len(data.outcomes)
    if model in ("univariate-random", "univariate-fixed"):
        k = data.outcomes.index(cfg.outcome) if cfg.outcome in data.outcomes else None
        if k is None:
            raise ValueError(f"outcome {cfg.outcome!r} is not in the data")
        shape = Shape.BILINEAR_RANDOM if model == "univariate-random" else Shape.BILINEAR_FIXED
        return ModelSpec((OutcomeSpec(cfg.outcome, shape),), J), data.select_outcome(k)
    if model in ("linear", "quadratic"):
        shape = Shape.LINEAR if model == "linear" else Shape.QUADRATIC
        return ModelSpec(tuple(OutcomeSpec(key, shape) for key in data.outcomes), J), data
    if K != 2:
        raise ValueError(f"model {model!r} needs two outcomes (columns y* and z*)")
    if model == "full":
        return ModelSpec.parallel_bilinear(J), data
    if model == "reduced":
        return ModelSpec.parallel_bilinear(J, False, False), data
    return ModelSpec.parallel_bilinear(J, cfg.random_knot == "y", cfg.random_knot == "z"), data


def condition_from_mapping(values: dict[str, str]) -> SimulationCondition:
    values = dict(values)
    try:
        cond = SimulationCondition(
            n=int(values.pop("n")),
            n_waves=int(values.pop("n_waves")),
            knot_means=(float(values.pop("knot_y")), float(values.pop("knot_z"))),
            rho=float(values.pop("rho")),
            scenario=int(values.pop("scenario")),
            resid_var=float(values.pop("resid_var")),
        )
    except KeyError as exc:
        raise ValueError(f"condition is missing key {exc.args[0]!r}") from None
    if values:
        raise ValueError(f"unknown condition key(s): {', '.join(sorted(values))}")
    return cond


def load_condition(path) -> SimulationCondition:
    path = Path(path)
    return condition_from_mapping(_parse_flat(path.read_text(encoding="utf-8"), str(path)))
