"""Maximum likelihood fitting with retries, standard errors and diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .likelihood import FIMLObjective, NotPositiveDefinite
from .model import (
    IndividualRecord,
    ModelSpec,
    OriginalParams,
    OutcomeParams,
    ReparamParams,
    Shape,
    layout,
    loading_mean,
    outcome_loadings,
    pack,
    unpack,
)
from .optimize import fd_hessian, minimize_box
from .reparam import to_original, to_reparam


class NonConvergence(RuntimeError):
    """Every attempt ended without meeting the convergence criterion.

    ``result`` holds the unconverged :class:`FitResult` of the last attempt.
    """

    def __init__(self, message: str, result: "FitResult | None" = None):
        super().__init__(message)
        self.result = result


class DegenerateData(ValueError):
    """The data cannot identify the requested model."""


@dataclass(frozen=True)
class FitOptions:
    max_attempts: int = 10
    gtol: float = 1e-6
    max_iter: int = 2000
    knot_bounds: dict | None = None  # outcome key -> (low, high); default observed time range
    ci_level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie strictly between 0 and 1")
        if self.gtol <= 0 or self.max_iter < 1:
            raise ValueError("gtol must be positive and max_iter at least 1")


@dataclass
class ImproprietyReport:
    negative_variances: list = field(default_factory=list)
    out_of_range_correlations: list = field(default_factory=list)  # (name_a, name_b, r)

    @property
    def proper(self) -> bool:
        return not self.negative_variances and not self.out_of_range_correlations

    @property
    def has_negative_variance(self) -> bool:
        return bool(self.negative_variances)


@dataclass
class FitResult:
    converged: bool
    attempts_used: int
    message: str
    spec: ModelSpec
    n: int
    names_prime: tuple
    names: tuple
    estimate_prime: np.ndarray
    estimate: np.ndarray
    se_prime: np.ndarray
    se: np.ndarray
    se_available: bool
    loglik: float
    minus2ll: float
    aic: float
    bic: float
    n_params: int
    ci_level: float
    improper: ImproprietyReport
    hessian_asymmetry: float = float("nan")
    trace: list = field(default_factory=list)

    @property
    def theta_prime(self) -> ReparamParams:
        return unpack(self.spec, self.estimate_prime, ReparamParams)

    @property
    def theta(self) -> OriginalParams:
        return unpack(self.spec, self.estimate, OriginalParams)

    @property
    def proper(self) -> bool:
        return self.improper.proper

    @property
    def residuals(self) -> dict:
        p = self.theta_prime
        out = {f"{k}:theta": op.resid_var for k, op in zip(self.spec.keys, p.outcomes)}
        if self.spec.parallel:
            out["yz:theta"] = p.resid_cov
        return out

    def _z(self):
        return stats.norm.ppf(0.5 + self.ci_level / 2.0)

    def wald_cis(self, original: bool = True) -> np.ndarray:
        """(k, 2) array of lower and upper Wald limits."""
        est, se = (self.estimate, self.se) if original else (self.estimate_prime, self.se_prime)
        z = self._z()
        return np.column_stack([est - z * se, est + z * se])

    def p_values(self, original: bool = True) -> np.ndarray:
        est, se = (self.estimate, self.se) if original else (self.estimate_prime, self.se_prime)
        with np.errstate(divide="ignore", invalid="ignore"):
            return 2.0 * stats.norm.sf(np.abs(est / se))

    def table(self, original: bool = True) -> list[dict]:
        names = self.names if original else self.names_prime
        est, se = (self.estimate, self.se) if original else (self.estimate_prime, self.se_prime)
        ci, p = self.wald_cis(original), self.p_values(original)
        return [
            {"name": n, "estimate": float(e), "se": float(s), "lower": float(c[0]), "upper": float(c[1]), "p": float(pv)}
            for n, e, s, c, pv in zip(names, est, se, ci, p)
        ]

    def implied_curve(self, times) -> dict:
        """Model-implied mean trajectory of each outcome at ``times``."""
        times = np.asarray(times, dtype=float)
        p = self.theta_prime
        return {
            key: outcome_loadings(o.shape, times, op) @ loading_mean(o.shape, op)
            for key, o, op in zip(self.spec.keys, self.spec.outcomes, p.outcomes)
        }

    def value(self, name: str, original: bool = True) -> float:
        names = self.names if original else self.names_prime
        est = self.estimate if original else self.estimate_prime
        return float(est[names.index(name)])


def fit_indices(loglik: float, k: int, n: int) -> tuple[float, float, float]:
    """Return (-2ll, AIC, BIC)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    m2 = -2.0 * loglik
    return m2, m2 + 2.0 * k, m2 + k * math.log(n)


def detect_improper(spec: ModelSpec, *params) -> ImproprietyReport:
    """Flag negative growth-factor variances and correlations outside [-1, 1].

    Each parameter set (original and/or reparameterized frame) is checked on
    its joint growth-factor covariance.
    """
    rep = ImproprietyReport()
    for p in params:
        prime = isinstance(p, ReparamParams)
        labels = _factor_names(spec, prime)
        psi = p.stacked_psi()
        d = np.diag(psi)
        for i, v in enumerate(d):
            if v < 0 and labels[i] not in rep.negative_variances:
                rep.negative_variances.append(labels[i])
        for i in range(len(d)):
            for j in range(i + 1, len(d)):
                if d[i] > 0 and d[j] > 0:
                    r = psi[i, j] / math.sqrt(d[i] * d[j])
                    if abs(r) > 1.0:
                        rep.out_of_range_correlations.append((labels[i], labels[j], float(r)))
    return rep


def _factor_names(spec: ModelSpec, prime: bool) -> list[str]:
    out = []
    for key, o in zip(spec.keys, spec.outcomes):
        p = "'" if prime and o.shape.is_bilinear else ""
        out += [f"{key}:eta{lab}{p}" if lab != "g" else f"{key}:gamma" for lab in o.shape.factor_labels]
    return out


# ----------------------------------------------------------------------------
# start values


def _design(shape: Shape, t, knot=None):
    t = np.asarray(t, dtype=float)
    if shape.is_bilinear:
        return np.column_stack([np.ones_like(t), np.minimum(t, knot), np.maximum(t - knot, 0.0)])
    return np.vander(t, 2 if shape is Shape.LINEAR else 3, increasing=True)


def _outcome_cells(data, k, template):
    ts, vs, ids = [], [], []
    for i, rec in enumerate(data):
        m = rec.mask[k] & template[k]
        ts.append(rec.times[m])
        vs.append(rec.values[k][m])
        ids.append(np.full(m.sum(), i))
    return np.concatenate(ts), np.concatenate(vs), np.concatenate(ids)


def _profile_knot(t, v):
    """Knot minimizing the pooled piecewise least-squares error.

    A grid search locates the basin; a bounded scalar search between the
    neighbouring grid points then refines it.
    """
    lo, hi = np.quantile(t, [0.1, 0.9])

    def sse(c):
        X = _design(Shape.BILINEAR_FIXED, t, c)
        coef, *_ = np.linalg.lstsq(X, v, rcond=None)
        return float(np.sum((v - X @ coef) ** 2))

    grid = np.linspace(lo, hi, 41)
    errs = [sse(c) for c in grid]
    j = int(np.argmin(errs))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    if b <= a:
        return float(grid[j])
    res = optimize.minimize_scalar(sse, bounds=(a, b), method="bounded", options={"xatol": 1e-10 * max(1.0, hi - lo)})
    return float(res.x) if res.fun <= errs[j] else float(grid[j])


def start_values(data: Sequence[IndividualRecord], spec: ModelSpec) -> ReparamParams:
    """Original-frame starts from least squares, forward-transformed."""
    template = spec.template_mask()
    n = len(data)
    coefs, means, resid_var, knots, resid_by_cell = [], [], [], [], []
    for k, o in enumerate(spec.outcomes):
        t, v, who = _outcome_cells(data, k, template)
        need = 3 if o.shape is not Shape.LINEAR else 2
        if np.unique(np.round(t, 12)).size < need + (1 if o.shape.is_bilinear else 0):
            raise DegenerateData(f"outcome {o.name!r}: too few distinct measurement times to identify a {o.shape.value} curve")
        knot = _profile_knot(t, v) if o.shape.is_bilinear else None
        X = _design(o.shape, t, knot)
        pooled, *_ = np.linalg.lstsq(X, v, rcond=None)
        q = X.shape[1]
        ind = np.full((n, q), np.nan)
        res = np.full((n, spec.n_waves), np.nan)
        ss, df = 0.0, 0
        for i in range(n):
            sel = who == i
            if sel.sum() <= q:
                continue
            ci, *_ = np.linalg.lstsq(X[sel], v[sel], rcond=None)
            e = v[sel] - X[sel] @ ci
            ind[i] = ci
            ss += float(e @ e)
            df += int(sel.sum()) - q
            res[i, (data[i].mask[k] & template[k])] = e
        sig2 = ss / df if df > 0 else float(np.var(v - X @ pooled))
        coefs.append(ind)
        means.append(pooled)
        resid_var.append(max(sig2, 1e-8 * float(np.var(v)) + 1e-12))
        knots.append(knot)
        resid_by_cell.append(res)

    ok = np.all(np.isfinite(np.hstack(coefs)), axis=1)
    blocks = []
    for k, o in enumerate(spec.outcomes):
        c = coefs[k][ok] if ok.sum() > 1 else np.zeros((0, coefs[k].shape[1]))
        blocks.append(c)
    stacked = np.hstack(blocks)
    if stacked.shape[0] > stacked.shape[1]:
        cov = np.cov(stacked, rowvar=False)
    else:
        cov = np.diag(np.concatenate([np.full(b.shape[1], 1.0) for b in blocks]))
    # keep the start strictly positive definite
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, 1e-3 * max(w.max(), 1e-6))
    cov = (V * w) @ V.T

    outs, sizes = [], []
    pos = 0
    for k, o in enumerate(spec.outcomes):
        q = means[k].size
        psi = cov[pos : pos + q, pos : pos + q]
        mean = means[k]
        fixed = None
        if o.shape is Shape.BILINEAR_RANDOM:
            t = _outcome_cells(data, k, template)[0]
            spacing = (t.max() - t.min()) / max(1, spec.n_waves - 1)
            mean = np.append(mean, knots[k])
            psi = np.pad(psi, ((0, 1), (0, 1)))
            psi[3, 3] = 0.1 * spacing**2
        elif o.shape is Shape.BILINEAR_FIXED:
            fixed = knots[k]
        outs.append(OutcomeParams(mean, psi, resid_var[k], fixed))
        sizes.append((pos, q))
        pos += q
    cross, rcov = None, 0.0
    if spec.parallel:
        (py, qy), (pz, qz) = sizes
        cross = np.zeros((outs[0].mean.size, outs[1].mean.size))
        cross[:qy, :qz] = cov[py : py + qy, pz : pz + qz]
        ry, rz = resid_by_cell
        both = np.isfinite(ry) & np.isfinite(rz)
        if both.sum() > 2:
            r = float(np.mean(ry[both] * rz[both]) / math.sqrt(resid_var[0] * resid_var[1]))
            rcov = float(np.clip(r, -0.9, 0.9)) * math.sqrt(resid_var[0] * resid_var[1])
    orig = OriginalParams(tuple(outs), cross, rcov)
    return to_reparam(spec, orig)


def _perturb(spec: ModelSpec, theta0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    names = layout(spec).names
    out = theta0.copy()
    for i, name in enumerate(names):
        if ":mu_" in name:
            out[i] *= rng.uniform(0.9, 1.1)
        else:
            out[i] *= rng.uniform(0.8, 1.25)
    return out


def _shrink_knot_variance(spec: ModelSpec, theta0: np.ndarray) -> np.ndarray:
    """The start with knot variances near zero and their covariances removed."""
    names = layout(spec).names
    out = theta0.copy()
    for i, name in enumerate(names):
        field_ = name.split(":", 1)[1]
        if field_.startswith("psi_") and "g" in field_[4:]:
            out[i] = 1e-4 * out[i] if field_.rstrip("'") == "psi_gg" else 0.0
    return out


# ----------------------------------------------------------------------------
# fitting


def _bounds(data, spec: ModelSpec, options: FitOptions):
    lay = layout(spec)
    lower = np.full(len(lay), -np.inf)
    upper = np.full(len(lay), np.inf)
    template = spec.template_mask()
    for k, (key, o) in enumerate(zip(spec.keys, spec.outcomes)):
        if not o.shape.is_bilinear:
            continue
        if options.knot_bounds and key in options.knot_bounds:
            lo, hi = options.knot_bounds[key]
        else:
            t = _outcome_cells(data, k, template)[0]
            lo, hi = float(t.min()), float(t.max())
        lower[lay.knot_index[key]] = lo
        upper[lay.knot_index[key]] = hi
    return lower, upper


def _back_transform(spec: ModelSpec, vec) -> np.ndarray:
    return pack(spec, to_original(spec, unpack(spec, vec, ReparamParams)))


def _delta_cov(spec: ModelSpec, est, cov_prime):
    k = est.size
    jac = np.empty((k, k))
    for j in range(k):
        h = 1e-6 * max(1.0, abs(est[j]))
        e = np.zeros(k)
        e[j] = h
        jac[:, j] = (_back_transform(spec, est + e) - _back_transform(spec, est - e)) / (2 * h)
    return jac @ cov_prime @ jac.T


def _inverse_curvature(fun_grad, x0):
    """Inverse of the finite-difference Hessian at the start (its diagonal if not positive definite)."""
    try:
        H = fd_hessian(lambda th: fun_grad(th)[1], x0)
    except (NotPositiveDefinite, np.linalg.LinAlgError):
        return None
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        return None
    try:
        np.linalg.cholesky(H)
        return np.linalg.inv(H)
    except np.linalg.LinAlgError:
        d = np.abs(np.diag(H))
        floor = 1e-8 * max(d.max(), 1e-300)
        return np.diag(1.0 / np.maximum(d, floor))


def fit(data: Sequence[IndividualRecord], spec: ModelSpec, options: FitOptions | None = None, start=None) -> FitResult:
    """Maximize the FIML log-likelihood over the reparameterized parameters.

    Raises :class:`NonConvergence` once ``options.max_attempts`` attempts
    have failed; the exception carries the last attempt's result.
    """
    options = options or FitOptions()
    if len(data) < 1:
        raise DegenerateData("no individuals")
    obj = FIMLObjective(data, spec)
    n = obj.n
    theta0 = pack(spec, start) if start is not None else pack(spec, start_values(data, spec))
    lower, upper = _bounds(data, spec, options)
    theta0 = np.clip(theta0, lower, upper)

    def fun_grad(theta):
        ll, g = obj.loglik_and_grad(theta)
        return -ll / n, -g / n

    rng = np.random.default_rng(np.random.SeedSequence(options.seed))
    res = None
    attempts = 0
    for attempts in range(1, options.max_attempts + 1):
        if attempts == 1:
            x0 = theta0
        elif attempts == 2 and spec.has_random_knot:
            # a knot variance started far above the data's scale can stall the descent
            x0 = _shrink_knot_variance(spec, theta0)
        else:
            x0 = np.clip(_perturb(spec, theta0, rng), lower, upper)
        res = minimize_box(
            fun_grad, x0, lower, upper, gtol=options.gtol, max_iter=options.max_iter, inv_hess0=_inverse_curvature(fun_grad, x0)
        )
        if res.converged:
            break
    result = _assemble(obj, spec, res, attempts, options)
    if not res.converged:
        raise NonConvergence(f"no convergence after {attempts} attempt(s): {res.message}", result)
    return result


def _assemble(obj: FIMLObjective, spec: ModelSpec, res, attempts: int, options: FitOptions) -> FitResult:
    est = res.x
    k, n = est.size, obj.n
    ll = -res.fun * n if np.isfinite(res.fun) else float("nan")
    if np.isfinite(ll):
        ll = obj.loglik(est)
    m2, aic, bic = fit_indices(ll, k, n)
    se_p = np.full(k, np.nan)
    se_o = np.full(k, np.nan)
    available = False
    asym = float("nan")
    try:
        estimate = _back_transform(spec, est)
    except (ValueError, np.linalg.LinAlgError):
        estimate = np.full(k, np.nan)
    if res.converged:
        try:
            H = fd_hessian(lambda th: -obj.loglik_and_grad(th)[1], est)
            scale = max(np.max(np.abs(H)), 1e-300)
            asym = float(np.max(np.abs(H - H.T)) / scale)
            H = 0.5 * (H + H.T)
            np.linalg.cholesky(H)
            cov = np.linalg.inv(H)
            se_p = np.sqrt(np.diag(cov))
            se_o = np.sqrt(np.maximum(np.diag(_delta_cov(spec, est, cov)), 0.0))
            available = bool(np.all(np.isfinite(se_p)))
        except (NotPositiveDefinite, np.linalg.LinAlgError):
            available = False
    try:
        improper = detect_improper(spec, unpack(spec, estimate, OriginalParams), unpack(spec, est, ReparamParams))
    except ValueError:
        improper = ImproprietyReport()
    return FitResult(
        converged=bool(res.converged),
        attempts_used=attempts,
        message=res.message,
        spec=spec,
        n=n,
        names_prime=layout(spec, prime=True).names,
        names=layout(spec, prime=False).names,
        estimate_prime=est.copy(),
        estimate=estimate,
        se_prime=se_p,
        se=se_o,
        se_available=available,
        loglik=ll,
        minus2ll=m2,
        aic=aic,
        bic=bic,
        n_params=k,
        ci_level=options.ci_level,
        improper=improper,
        hessian_asymmetry=asym,
        trace=list(res.trace),
    )
