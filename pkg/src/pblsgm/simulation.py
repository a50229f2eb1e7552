"""Monte Carlo harness: condition grid, data generation, replication loop and metrics."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .estimation import FitOptions, FitResult, NonConvergence, fit
from .model import IndividualRecord, ModelSpec, OriginalParams, OutcomeParams, bilinear_value, layout, pack

SCENARIO_MEANS = {
    # (intercept, first slope, second slope) for y and z
    1: ((98.0, 5.0, 2.6), (102.0, 5.0, 2.6)),
    2: ((100.0, 4.4, 2.0), (100.0, 3.6, 2.0)),
    3: ((100.0, 5.0, 2.6), (100.0, 5.0, 3.4)),
}
KNOT_CONFIGS = {6: ((2.5, 2.5),), 10: ((4.5, 4.5), (3.5, 5.5))}
WITHIN_VARIANCES = (25.0, 1.0, 1.0, 0.09)
WITHIN_CORR = 0.3


class ConditionFailure(RuntimeError):
    """The fitter failed too often to collect the requested replications."""


@dataclass(frozen=True)
class SimulationCondition:
    n: int
    n_waves: int
    knot_means: tuple[float, float]
    rho: float
    scenario: int
    resid_var: float
    delta: float = 0.25
    resid_corr: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "knot_means", tuple(float(k) for k in self.knot_means))
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.n_waves not in KNOT_CONFIGS:
            raise ValueError(f"n_waves must be one of {sorted(KNOT_CONFIGS)}")
        if self.knot_means not in KNOT_CONFIGS[self.n_waves]:
            allowed = ", ".join(str(k) for k in KNOT_CONFIGS[self.n_waves])
            raise ValueError(f"knot means {self.knot_means} not permitted with {self.n_waves} waves (allowed: {allowed})")
        if self.scenario not in SCENARIO_MEANS:
            raise ValueError("scenario must be 1, 2 or 3")
        if self.resid_var < 0 or not -1 <= self.resid_corr <= 1 or self.delta < 0:
            raise ValueError("invalid residual or timing settings")
        w = np.linalg.eigvalsh(self.factor_cov())
        if w.min() < -1e-10:
            raise ValueError(f"growth-factor covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")

    @property
    def label(self) -> str:
        ky, kz = self.knot_means
        return (
            f"n{self.n}_J{self.n_waves}_knots{ky:g}-{kz:g}_rho{self.rho:g}"
            f"_s{self.scenario}_theta{self.resid_var:g}"
        )

    def factor_means(self) -> np.ndarray:
        """(2, 4) original-frame means (intercept, slopes, knot) of y and z."""
        my, mz = SCENARIO_MEANS[self.scenario]
        return np.array([[*my, self.knot_means[0]], [*mz, self.knot_means[1]]])

    def factor_cov(self) -> np.ndarray:
        """Joint 8x8 covariance of (y factors, z factors)."""
        sd = np.sqrt(WITHIN_VARIANCES)
        corr = np.full((4, 4), WITHIN_CORR)
        np.fill_diagonal(corr, 1.0)
        within = corr * np.outer(sd, sd)
        cross = self.rho * np.outer(sd, sd)
        return np.block([[within, cross], [cross.T, within]])

    def truth(self) -> OriginalParams:
        means, cov = self.factor_means(), self.factor_cov()
        rc = self.resid_corr * self.resid_var
        outs = tuple(OutcomeParams(means[k], cov[4 * k : 4 * k + 4, 4 * k : 4 * k + 4], self.resid_var) for k in range(2))
        return OriginalParams(outs, cov[:4, 4:], rc)

    def truth_by_name(self) -> dict[str, float]:
        spec = ModelSpec.parallel_bilinear(self.n_waves)
        return dict(zip(layout(spec, prime=False).names, pack(spec, self.truth()).tolist()))


def condition_grid() -> list[SimulationCondition]:
    out = []
    for n, theta, rho, scen in itertools.product((200, 500), (1.0, 2.0), (-0.3, 0.0, 0.3), (1, 2, 3)):
        for J, configs in KNOT_CONFIGS.items():
            for knots in configs:
                out.append(SimulationCondition(n, J, knots, rho, scen, theta))
    return out


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.maximum(w, 0.0))


def generate_dataset(condition: SimulationCondition, rng: np.random.Generator) -> list[IndividualRecord]:
    n, J = condition.n, condition.n_waves
    means = condition.factor_means().reshape(-1)
    factors = means + rng.standard_normal((n, 8)) @ _psd_factor(condition.factor_cov()).T
    grid = np.arange(J, dtype=float)
    times = grid + rng.uniform(-condition.delta, condition.delta, size=(n, J))
    th, rc = condition.resid_var, condition.resid_corr * condition.resid_var
    resid_factor = _psd_factor(np.array([[th, rc], [rc, th]]))
    eps = rng.standard_normal((n, J, 2)) @ resid_factor.T
    values = np.empty((n, 2, J))
    for k in range(2):
        f = factors[:, 4 * k : 4 * k + 4]
        values[:, k, :] = bilinear_value(f[:, [0]], f[:, [1]], f[:, [2]], f[:, [3]], times) + eps[:, :, k]
    return [IndividualRecord.complete(str(i + 1), times[i], values[i]) for i in range(n)]


# ----------------------------------------------------------------------------
# replication loop


@dataclass
class ReplicationFit:
    """What the replication loop needs from one fit (original frame)."""

    names: tuple
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    proper: bool = True
    negative_variance: bool = False
    out_of_range: bool = False

    @classmethod
    def from_fit(cls, res: FitResult) -> "ReplicationFit":
        ci = res.wald_cis()
        return cls(
            res.names,
            res.estimate.copy(),
            res.se.copy(),
            ci[:, 0],
            ci[:, 1],
            res.improper.proper,
            bool(res.improper.negative_variances),
            bool(res.improper.out_of_range_correlations),
        )


Fitter = Callable[[Sequence[IndividualRecord], ModelSpec, int], ReplicationFit]


def default_fitter(data, spec: ModelSpec, seed: int) -> ReplicationFit:
    return ReplicationFit.from_fit(fit(data, spec, FitOptions(seed=seed)))


@dataclass
class Metrics:
    rel_bias: float
    emp_se: float
    rel_rmse: float
    coverage: float
    mc_se_bias: float
    absolute: bool = False
    n_reps: int = 0


def performance_metrics(estimates, ses, cis, theta_true: float) -> Metrics:
    """Bias, empirical SE, RMSE, CI coverage and the Monte Carlo SE of the bias.

    When ``theta_true`` is 0 the bias and RMSE are absolute and flagged.
    Non-finite estimates (excluded replications) are dropped.
    """
    est = np.asarray(estimates, dtype=float)
    cis = np.asarray(cis, dtype=float).reshape(-1, 2)
    keep = np.isfinite(est)
    est, cis = est[keep], cis[keep]
    S = est.size
    if S == 0:
        return Metrics(*(float("nan"),) * 5, absolute=theta_true == 0, n_reps=0)
    err = est - theta_true
    emp_se = float(np.std(est, ddof=1)) if S > 1 else float("nan")
    absolute = theta_true == 0
    scale = 1.0 if absolute else theta_true
    rel_bias = float(np.sum(err) / (S * scale))
    rel_rmse = float(math.sqrt(np.sum(err**2) / S) / abs(scale))
    cover = float(np.mean((cis[:, 0] <= theta_true) & (theta_true <= cis[:, 1])))
    mc = emp_se / math.sqrt(S) if S > 1 else float("nan")
    return Metrics(rel_bias, emp_se, rel_rmse, cover, mc, absolute, S)


@dataclass
class ConditionResult:
    condition: SimulationCondition
    S: int
    full: dict  # parameter name -> Metrics, full model with the replacement rule applied
    reduced: dict  # parameter name -> Metrics, reduced model on every replication
    datasets_generated: int
    full_nonconverged: int
    reduced_nonconverged: int
    improper: int
    improper_negative_variance: int
    improper_out_of_range: int
    mean_se: dict = field(default_factory=dict)  # full model, proper replications only

    def to_dict(self) -> dict:
        d = {
            "condition": asdict(self.condition),
            "label": self.condition.label,
            "S": self.S,
            "datasets_generated": self.datasets_generated,
            "full_nonconverged": self.full_nonconverged,
            "reduced_nonconverged": self.reduced_nonconverged,
            "improper": self.improper,
            "improper_negative_variance": self.improper_negative_variance,
            "improper_out_of_range": self.improper_out_of_range,
            "full": {k: asdict(v) for k, v in self.full.items()},
            "reduced": {k: asdict(v) for k, v in self.reduced.items()},
            "mean_se": dict(self.mean_se),
        }
        d["condition"]["knot_means"] = list(self.condition.knot_means)
        return d


def _is_knot_variance(name: str) -> bool:
    return "psi_" in name and "g" in name.split("psi_")[1]


def _one_replication(condition: SimulationCondition, seed: int, rep: int, fitter: Fitter, max_datasets: int):
    """Generate datasets from this replication's own stream until the full model converges."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
    full_spec = ModelSpec.parallel_bilinear(condition.n_waves)
    red_spec = ModelSpec.parallel_bilinear(condition.n_waves, False, False)
    full_fail = 0
    for _ in range(max_datasets):
        data = generate_dataset(condition, rng)
        fit_seed = int(rng.integers(2**31))
        try:
            full = fitter(data, full_spec, fit_seed)
        except NonConvergence:
            full_fail += 1
            continue
        try:
            red = fitter(data, red_spec, fit_seed)
        except NonConvergence:
            red = None
        return full, red, full_fail
    return None, None, full_fail


def run_condition(
    condition: SimulationCondition,
    S: int,
    fitter: Fitter | None = None,
    seed: int = 0,
    workers: int = 1,
) -> ConditionResult:
    """Collect ``S`` replications whose full-model fit converged and summarize them.

    Each replication draws from its own stream seeded by ``(seed, replication)``,
    so retries inside one replication never shift another.  Improper full
    fits are replaced by the reduced fit for the shared parameters, and their
    knot-variance parameters are excluded from the metrics.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    fitter = fitter or default_fitter
    budget = 10 * S
    args = [(condition, seed, r, fitter, budget) for r in range(S)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            reps = list(ex.map(_one_replication, *zip(*args)))
    else:
        reps = [_one_replication(*a) for a in args]
    generated = sum(f + (1 if full is not None else 0) for full, _, f in reps)
    if any(full is None for full, _, _ in reps) or generated > budget:
        raise ConditionFailure(f"{condition.label}: needed more than {budget} datasets for {S} convergent replications")

    truth = condition.truth_by_name()
    names = list(truth)
    full_est = np.full((S, len(names)), np.nan)
    full_lo, full_hi = full_est.copy(), full_est.copy()
    full_se = full_est.copy()
    red_est, red_lo, red_hi = full_est.copy(), full_est.copy(), full_est.copy()
    counts = {"improper": 0, "neg": 0, "oor": 0, "red_fail": 0}
    for s, (full, red, _) in enumerate(reps):
        if red is None:
            counts["red_fail"] += 1
        else:
            for name, e, lo, hi in zip(red.names, red.estimate, red.lower, red.upper):
                j = names.index(name)
                red_est[s, j], red_lo[s, j], red_hi[s, j] = e, lo, hi
        if full.proper:
            for name, e, se, lo, hi in zip(full.names, full.estimate, full.se, full.lower, full.upper):
                j = names.index(name)
                full_est[s, j], full_se[s, j], full_lo[s, j], full_hi[s, j] = e, se, lo, hi
            continue
        counts["improper"] += 1
        counts["neg"] += full.negative_variance
        counts["oor"] += full.out_of_range and not full.negative_variance
        if red is not None:
            full_est[s], full_lo[s], full_hi[s] = red_est[s], red_lo[s], red_hi[s]
    full_metrics, red_metrics, mean_se = {}, {}, {}
    for j, name in enumerate(names):
        ci_full = np.column_stack([full_lo[:, j], full_hi[:, j]])
        full_metrics[name] = performance_metrics(full_est[:, j], None, ci_full, truth[name])
        se = full_se[:, j]
        mean_se[name] = float(np.mean(se[np.isfinite(se)])) if np.isfinite(se).any() else float("nan")
        if not _is_knot_variance(name):
            ci_red = np.column_stack([red_lo[:, j], red_hi[:, j]])
            red_metrics[name] = performance_metrics(red_est[:, j], None, ci_red, truth[name])
    return ConditionResult(
        condition,
        S,
        full_metrics,
        red_metrics,
        generated,
        generated - S,
        counts["red_fail"],
        counts["improper"],
        counts["neg"],
        counts["oor"],
        mean_se,
    )


def rollup(results: Sequence[ConditionResult], model: str = "full", metric: str = "rel_bias") -> dict:
    """Median and range of one metric per parameter across conditions."""
    table: dict[str, list[float]] = {}
    for r in results:
        for name, m in getattr(r, model).items():
            v = getattr(m, metric)
            if math.isfinite(v):
                table.setdefault(name, []).append(v)
    return {k: {"median": float(np.median(v)), "min": float(min(v)), "max": float(max(v))} for k, v in table.items()}
