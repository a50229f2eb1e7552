"""Transformations between the original and reparameterized growth-factor frames.

The forward map takes (intercept, first slope, second slope, knot) to
(measurement at the knot, mean of the slopes, half difference of the slopes,
knot deviation).  Means go through the map itself; covariances go through
its Jacobian at the population mean (first-order delta method).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import ModelSpec, OriginalParams, OutcomeParams, ParamSet, ReparamParams, Shape, check_params


class Direction(str, Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


@dataclass(frozen=True)
class TransformJacobian:
    matrix: np.ndarray
    direction: Direction
    evaluated_at: np.ndarray

    def reduced(self) -> "TransformJacobian":
        """Upper-left 3x3 block, used when the knot has no variance."""
        return TransformJacobian(self.matrix[:3, :3].copy(), self.direction, self.evaluated_at)


def forward_mean(mu) -> np.ndarray:
    """(eta0, eta1, eta2, gamma) -> (eta0 + gamma*eta1, (eta1+eta2)/2, (eta2-eta1)/2, 0)."""
    e0, e1, e2, g = np.asarray(mu, dtype=float)
    return np.array([e0 + g * e1, (e1 + e2) / 2.0, (e2 - e1) / 2.0, 0.0])


def inverse_mean(mu_prime, mu_gamma: float) -> np.ndarray:
    """Inverse of :func:`forward_mean`; the fourth input entry (deviation mean) is ignored."""
    m0, m1, m2 = np.asarray(mu_prime, dtype=float)[:3]
    return np.array([m0 - mu_gamma * m1 + mu_gamma * m2, m1 - m2, m1 + m2, float(mu_gamma)])


def grad_forward(mu) -> TransformJacobian:
    mu = np.asarray(mu, dtype=float)
    _, e1, _, g = mu
    m = np.array(
        [
            [1.0, g, 0.0, e1],
            [0.0, 0.5, 0.5, 0.0],
            [0.0, -0.5, 0.5, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return TransformJacobian(m, Direction.FORWARD, mu.copy())


def grad_inverse(mu_prime, mu_gamma: float) -> TransformJacobian:
    """Jacobian of the inverse map at the reparameterized mean.

    The intercept row depends on the knot deviation through
    ``-(mu1' - mu2')``, i.e. minus the first-slope mean; keeping that term
    makes this matrix the exact inverse of :func:`grad_forward`.
    """
    mp = np.asarray(mu_prime, dtype=float)
    a = mp[1] - mp[2]
    m = np.array(
        [
            [1.0, -mu_gamma, mu_gamma, -a],
            [0.0, 1.0, -1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return TransformJacobian(m, Direction.INVERSE, np.append(mp[:3], mu_gamma))


def transform_cov(psi_y, psi_z, psi_yz, jac_y, jac_z):
    """Push within- and cross-outcome covariance blocks through Jacobians.

    ``psi_z``/``psi_yz``/``jac_z`` may be ``None`` for a single outcome.
    Jacobians may be :class:`TransformJacobian` or plain arrays.
    """
    jy = _as_matrix(jac_y)
    psi_y = np.asarray(psi_y, dtype=float)
    if psi_y.shape != (jy.shape[1], jy.shape[1]):
        raise ValueError(f"psi_y {psi_y.shape} does not match Jacobian {jy.shape}")
    out_y = jy @ psi_y @ jy.T
    if psi_z is None:
        return out_y, None, None
    jz = _as_matrix(jac_z)
    psi_z = np.asarray(psi_z, dtype=float)
    psi_yz = np.asarray(psi_yz, dtype=float)
    if psi_z.shape != (jz.shape[1], jz.shape[1]) or psi_yz.shape != (jy.shape[1], jz.shape[1]):
        raise ValueError("covariance blocks do not match the Jacobians")
    return out_y, jz @ psi_z @ jz.T, jy @ psi_yz @ jz.T


def _as_matrix(j) -> np.ndarray:
    return j.matrix if isinstance(j, TransformJacobian) else np.asarray(j, dtype=float)


# ----------------------------------------------------------------------------
# whole parameter sets


def _jacobians(spec: ModelSpec, params: ParamSet, direction: Direction):
    jacs = []
    for o, op in zip(spec.outcomes, params.outcomes):
        q = o.shape.n_factors
        if not o.shape.is_bilinear:
            jacs.append(np.eye(q))
            continue
        knot = op.mean[3] if o.shape is Shape.BILINEAR_RANDOM else op.knot
        if direction is Direction.FORWARD:
            j = grad_forward(np.append(op.mean[:3], knot)).matrix
        else:
            j = grad_inverse(op.mean[:3], knot).matrix
        jacs.append(j[:q, :q])
    return jacs


def _map_means(spec, params, direction):
    means = []
    for o, op in zip(spec.outcomes, params.outcomes):
        if not o.shape.is_bilinear:
            means.append(op.mean.copy())
            continue
        knot = op.mean[3] if o.shape is Shape.BILINEAR_RANDOM else op.knot
        if direction is Direction.FORWARD:
            m = forward_mean(np.append(op.mean[:3], knot))
        else:
            m = inverse_mean(op.mean[:3], knot)
        m[3] = knot
        means.append(m[: o.shape.n_factors])
    return means


def _convert(spec: ModelSpec, params: ParamSet, direction: Direction, cls):
    check_params(spec, params)
    jacs = _jacobians(spec, params, direction)
    means = _map_means(spec, params, direction)
    if spec.parallel:
        y, z = params.outcomes
        py, pz, pyz = transform_cov(y.psi, z.psi, params.cross_psi, jacs[0], jacs[1])
        psis = [py, pz]
    else:
        psis = [transform_cov(params.outcomes[0].psi, None, None, jacs[0], None)[0]]
        pyz = None
    outs = tuple(
        OutcomeParams(m, p, op.resid_var, op.knot) for m, p, op in zip(means, psis, params.outcomes)
    )
    return cls(outs, pyz, params.resid_cov)


def to_reparam(spec: ModelSpec, params: OriginalParams) -> ReparamParams:
    return _convert(spec, params, Direction.FORWARD, ReparamParams)


def to_original(spec: ModelSpec, params: ReparamParams) -> OriginalParams:
    return _convert(spec, params, Direction.INVERSE, OriginalParams)


# ----------------------------------------------------------------------------
# closed forms, cell by cell


def _within_cells(mp, p, c):
    """Original-frame mean and covariance of one random-knot outcome, written per cell."""
    m0, m1, m2 = mp[0], mp[1], mp[2]
    a = m1 - m2
    p00, p01, p02, p0g = p[0, 0], p[0, 1], p[0, 2], p[0, 3]
    p11, p12, p1g = p[1, 1], p[1, 2], p[1, 3]
    p22, p2g = p[2, 2], p[2, 3]
    pgg = p[3, 3]
    mean = np.array([m0 - c * m1 + c * m2, m1 - m2, m2 + m1, c])
    s = {}
    s["00"] = (
        (p11 + p22 - 2 * p12) * c**2
        + 2 * (p02 - p01) * c
        + p00
        + a**2 * pgg
        - 2 * a * p0g
        + 2 * a * c * (p1g - p2g)
    )
    s["01"] = (2 * p12 - p11 - p22) * c + (p01 - p02) - a * (p1g - p2g)
    s["02"] = (p22 - p11) * c + (p01 + p02) - a * (p1g + p2g)
    s["0g"] = (p2g - p1g) * c + p0g - a * pgg
    s["11"] = p11 + p22 - 2 * p12
    s["12"] = p11 - p22
    s["1g"] = p1g - p2g
    s["22"] = p11 + p22 + 2 * p12
    s["2g"] = p1g + p2g
    s["gg"] = pgg
    return mean, s


def _cross_cells(q, cy, cz, ay, az):
    idx = {"0": 0, "1": 1, "2": 2, "g": 3}
    Q = {i + j: q[idx[i], idx[j]] for i in idx for j in idx}
    s = {}
    s["00"] = (
        (Q["11"] + Q["22"] - Q["12"] - Q["21"]) * cy * cz
        + (Q["20"] - Q["10"]) * cy
        + (Q["02"] - Q["01"]) * cz
        + Q["00"]
        - az * Q["0g"]
        - ay * Q["g0"]
        + cy * az * (Q["1g"] - Q["2g"])
        + ay * cz * (Q["g1"] - Q["g2"])
        + ay * az * Q["gg"]
    )
    s["01"] = (Q["12"] + Q["21"] - Q["11"] - Q["22"]) * cy + (Q["01"] - Q["02"]) - ay * (Q["g1"] - Q["g2"])
    s["02"] = (Q["21"] - Q["12"] - Q["11"] + Q["22"]) * cy + (Q["01"] + Q["02"]) - ay * (Q["g1"] + Q["g2"])
    s["0g"] = Q["0g"] + (Q["2g"] - Q["1g"]) * cy - ay * Q["gg"]
    s["10"] = (Q["12"] + Q["21"] - Q["11"] - Q["22"]) * cz + (Q["10"] - Q["20"]) - az * (Q["1g"] - Q["2g"])
    s["11"] = Q["11"] - Q["21"] - Q["12"] + Q["22"]
    s["12"] = Q["11"] - Q["21"] + Q["12"] - Q["22"]
    s["1g"] = Q["1g"] - Q["2g"]
    s["20"] = (Q["12"] - Q["21"] - Q["11"] + Q["22"]) * cz + (Q["10"] + Q["20"]) - az * (Q["1g"] + Q["2g"])
    s["21"] = Q["11"] - Q["22"] - Q["12"] + Q["21"]
    s["22"] = Q["11"] + Q["22"] + Q["12"] + Q["21"]
    s["2g"] = Q["1g"] + Q["2g"]
    s["g0"] = Q["g0"] + (Q["g2"] - Q["g1"]) * cz - az * Q["gg"]
    s["g1"] = Q["g1"] - Q["g2"]
    s["g2"] = Q["g1"] + Q["g2"]
    s["gg"] = Q["gg"]
    return s


def inverse_cov_percell(params_prime: ReparamParams) -> OriginalParams:
    """Back-transform a random-knot parameter set one cell at a time.

    Serves as a check on the matrix route (:func:`to_original`): the
    formulas below are expanded by hand rather than built from matrix
    products.
    """
    labels = "012g"
    outs, cells = [], []
    for op in params_prime.outcomes:
        if op.mean.shape[0] != 4:
            raise ValueError("per-cell closed forms cover random-knot outcomes only")
        mean, s = _within_cells(op.mean, op.psi, op.mean[3])
        psi = np.empty((4, 4))
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                psi[i, j] = s[a + b] if i <= j else s[b + a]
        outs.append(OutcomeParams(mean, psi, op.resid_var))
        cells.append((op.mean[3], op.mean[1] - op.mean[2]))
    cross = None
    if len(outs) == 2:
        (cy, ay), (cz, az) = cells
        s = _cross_cells(params_prime.cross_psi, cy, cz, ay, az)
        cross = np.array([[s[a + b] for b in labels] for a in labels])
    return OriginalParams(tuple(outs), cross, params_prime.resid_cov)
