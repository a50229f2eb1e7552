"""Box-constrained quasi-Newton minimization and finite-difference Hessians."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .likelihood import NotPositiveDefinite

FunGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    nit: int
    nfev: int
    message: str
    trace: list = field(default_factory=list)


def _safe(fun_grad: FunGrad, x):
    try:
        f, g = fun_grad(x)
    except (NotPositiveDefinite, np.linalg.LinAlgError, FloatingPointError):
        return np.inf, None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return np.inf, None
    return float(f), np.asarray(g, dtype=float)


def _free(x, g, lower, upper):
    """Variables not held at a bound by a gradient pointing outward."""
    at_low = (x <= lower) & (g > 0)
    at_up = (x >= upper) & (g < 0)
    return ~(at_low | at_up)


def projected_grad_norm(x, g, lower, upper) -> float:
    pg = np.where(_free(x, g, lower, upper), g, 0.0)
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def minimize_box(
    fun_grad: FunGrad,
    x0,
    lower=None,
    upper=None,
    gtol: float = 1e-6,
    ftol_rel: float = 1e-10,
    max_iter: int = 2000,
    polish: bool = True,
    inv_hess0: np.ndarray | None = None,
) -> OptimResult:
    """Minimize ``f`` subject to ``lower <= x <= upper`` (bounds may be infinite).

    BFGS on the free variables with step truncation at the bounds and an
    Armijo backtracking line search; evaluation failures (non-finite values
    or a non positive definite implied covariance) shrink the step.  When
    BFGS stalls short of the tolerance, damped Newton steps on a
    finite-difference Hessian take over.

    Convergence requires the projected gradient max-norm below ``gtol`` and
    a relative objective change below ``ftol_rel`` over the last step.
    ``inv_hess0`` seeds the inverse-Hessian approximation (identity if omitted).
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x = np.clip(x, lower, upper)
    f, g = _safe(fun_grad, x)
    nfev = 1
    if g is None:
        return OptimResult(x, f, np.full(n, np.nan), False, 0, nfev, "objective undefined at the start point")
    trace = [f]
    H0 = np.eye(n) if inv_hess0 is None else np.asarray(inv_hess0, dtype=float)
    H = H0.copy()
    scaled = inv_hess0 is not None
    rel_change = np.inf
    stall = 0
    nit = 0
    message = "iteration limit reached"
    while nit < max_iter:
        if projected_grad_norm(x, g, lower, upper) < gtol and rel_change < ftol_rel:
            return OptimResult(x, f, g, True, nit, nfev, "converged", trace)
        nit += 1
        free = _free(x, g, lower, upper)
        d = np.zeros(n)
        d[free] = -H[np.ix_(free, free)] @ g[free]
        slope = g @ d
        if not slope < 0:
            H = H0.copy()
            scaled = inv_hess0 is not None
            d = np.zeros(n)
            d[free] = -H[np.ix_(free, free)] @ g[free]
            slope = g @ d
            if not slope < 0:
                break
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(d > 0, (upper - x) / d, np.where(d < 0, (lower - x) / d, np.inf))
        alpha = min(1.0, float(np.min(room))) if n else 1.0
        if not scaled:
            alpha = min(alpha, 1.0 / max(1.0, float(np.max(np.abs(d)))))
        accepted = False
        for _ in range(60):
            xn = np.clip(x + alpha * d, lower, upper)
            fn, gn = _safe(fun_grad, xn)
            nfev += 1
            if gn is not None and fn <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            message = "line search failed"
            stall += 1
            if stall > 2:
                break
            H = H0.copy()
            scaled = inv_hess0 is not None
            continue
        stall = 0
        s, y = xn - x, gn - g
        rel_change = abs(f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        trace.append(f)
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                H = np.eye(n) * (sy / (y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
        if rel_change == 0.0 and projected_grad_norm(x, g, lower, upper) >= gtol:
            message = "no progress"
            break
    res = OptimResult(x, f, g, False, nit, nfev, message, trace)
    if polish:
        res = newton_polish(fun_grad, res, lower, upper, gtol, ftol_rel)
    return res


def fd_hessian(grad: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``grad`` (unsymmetrized).

    A column whose stencil leaves the region where ``grad`` is defined is
    retried with steps a hundred times smaller, down to 1e-6 of the first step.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        for attempt in range(4):
            e = np.zeros(n)
            e[j] = h
            try:
                H[:, j] = (grad(x + e) - grad(x - e)) / (2.0 * h)
                break
            except (NotPositiveDefinite, np.linalg.LinAlgError):
                if attempt == 3:
                    raise
                h *= 0.01
    return H


def newton_polish(fun_grad, res: OptimResult, lower, upper, gtol, ftol_rel, max_iter: int = 25) -> OptimResult:
    x, f, g = res.x.copy(), res.fun, res.grad.copy()
    trace = list(res.trace)
    nfev, nit = res.nfev, res.nit
    if g is None or not np.all(np.isfinite(g)):
        return res

    def grad_only(z):
        fz, gz = _safe(fun_grad, z)
        if gz is None:
            raise NotPositiveDefinite("gradient undefined inside the Hessian stencil")
        return gz

    rel_change = np.inf
    for _ in range(max_iter):
        if projected_grad_norm(x, g, lower, upper) < gtol and rel_change < ftol_rel:
            return OptimResult(x, f, g, True, nit, nfev, "converged", trace)
        nit += 1
        free = _free(x, g, lower, upper)
        try:
            H = fd_hessian(grad_only, x)
        except NotPositiveDefinite:
            break
        nfev += 2 * x.size
        H = 0.5 * (H + H.T)[np.ix_(free, free)]
        lam = 0.0
        scale = max(1e-12, float(np.max(np.abs(np.diag(H))))) if H.size else 1.0
        accepted = False
        for _ in range(30):
            try:
                L = np.linalg.cholesky(H + lam * np.eye(H.shape[0]))
            except np.linalg.LinAlgError:
                lam = max(2.0 * lam, 1e-8 * scale)
                continue
            d = np.zeros_like(x)
            d[free] = -np.linalg.solve(L.T, np.linalg.solve(L, g[free]))
            alpha = 1.0
            for _ in range(30):
                xn = np.clip(x + alpha * d, lower, upper)
                fn, gn = _safe(fun_grad, xn)
                nfev += 1
                if gn is not None and fn <= f + 1e-4 * alpha * (g @ d):
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
            lam = max(10.0 * lam, 1e-6 * scale)
        if not accepted:
            break
        rel_change = abs(f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        trace.append(f)
    ok = projected_grad_norm(x, g, lower, upper) < gtol and rel_change < ftol_rel
    return OptimResult(x, f, g, ok, nit, nfev, "converged" if ok else res.message, trace)
