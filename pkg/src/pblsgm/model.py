"""Trajectory shapes, parameter containers and model-implied moments.

Every supported model is a (possibly parallel) latent growth curve model
whose per-individual loadings depend on the measurement occasions.  Bilinear
shapes are expressed in the reparameterized frame (measurement at the knot,
mean of the two slopes, half difference of the slopes and, for a random
knot, the deviation from the knot mean) so that the model is linear in the
growth factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class Shape(str, Enum):
    BILINEAR_RANDOM = "bilinear_random"
    BILINEAR_FIXED = "bilinear_fixed"
    LINEAR = "linear"
    QUADRATIC = "quadratic"

    @property
    def n_factors(self) -> int:
        return {"bilinear_random": 4, "bilinear_fixed": 3, "linear": 2, "quadratic": 3}[self.value]

    @property
    def factor_labels(self) -> tuple[str, ...]:
        return ("0", "1", "2", "g")[: self.n_factors]

    @property
    def is_bilinear(self) -> bool:
        return self in (Shape.BILINEAR_RANDOM, Shape.BILINEAR_FIXED)

    @property
    def random_knot(self) -> bool:
        return self is Shape.BILINEAR_RANDOM


@dataclass(frozen=True)
class OutcomeSpec:
    """One repeated outcome: its name, trajectory shape and measured waves.

    ``waves`` is the observation template (indices of the waves at which the
    outcome is measured); ``None`` means every wave.
    """

    name: str
    shape: Shape
    waves: tuple[int, ...] | None = None

    @property
    def random_knot(self) -> bool:
        return self.shape.random_knot


@dataclass(frozen=True)
class ModelSpec:
    outcomes: tuple[OutcomeSpec, ...]
    n_waves: int

    def __post_init__(self):
        if not 1 <= len(self.outcomes) <= 2:
            raise ValueError("a model has one or two outcomes")
        if self.n_waves < 1:
            raise ValueError("n_waves must be positive")
        for o in self.outcomes:
            if o.waves is not None and any(not 0 <= w < self.n_waves for w in o.waves):
                raise ValueError(f"observation template of {o.name!r} refers to a wave outside 0..{self.n_waves - 1}")

    @property
    def parallel(self) -> bool:
        return len(self.outcomes) == 2

    @property
    def has_random_knot(self) -> bool:
        return any(o.shape is Shape.BILINEAR_RANDOM for o in self.outcomes)

    @property
    def keys(self) -> tuple[str, ...]:
        """Short keys used in parameter names (``y`` and ``z``)."""
        return ("y", "z")[: len(self.outcomes)]

    def template_mask(self) -> np.ndarray:
        """Boolean (n_outcomes, J) mask of cells the model expects to see."""
        m = np.zeros((len(self.outcomes), self.n_waves), dtype=bool)
        for k, o in enumerate(self.outcomes):
            m[k, list(range(self.n_waves)) if o.waves is None else list(o.waves)] = True
        return m

    @classmethod
    def parallel_bilinear(cls, n_waves: int, random_y: bool = True, random_z: bool = True) -> "ModelSpec":
        sy = Shape.BILINEAR_RANDOM if random_y else Shape.BILINEAR_FIXED
        sz = Shape.BILINEAR_RANDOM if random_z else Shape.BILINEAR_FIXED
        return cls((OutcomeSpec("y", sy), OutcomeSpec("z", sz)), n_waves)


@dataclass(frozen=True)
class IndividualRecord:
    """One subject: measurement occasions, outcome values and observed-cell mask.

    ``values`` and ``mask`` have shape (n_outcomes, J).  Masked cells hold NaN.
    """

    id: str
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
        if values.shape != mask.shape or values.shape[1] != times.shape[0]:
            raise ValueError(f"record {self.id}: times, values and mask disagree in shape")
        if not mask.any():
            raise ValueError(f"record {self.id}: no observed cell")
        values = np.where(mask, values, np.nan)
        if not np.all(np.isfinite(values[mask])):
            raise ValueError(f"record {self.id}: observed cell is not finite")
        used = times[mask.any(axis=0)]
        if not np.all(np.isfinite(used)) or np.any(np.diff(used) <= 0):
            raise ValueError(f"record {self.id}: measurement times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def complete(cls, id: str, times, values) -> "IndividualRecord":
        values = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(id, np.asarray(times, dtype=float), values, np.ones(values.shape, dtype=bool))


@dataclass(frozen=True)
class OutcomeParams:
    """Growth-factor block of one outcome.

    ``mean`` holds one entry per growth factor.  For a random knot its last
    entry is the knot mean, in both frames (the deviation factor has mean 0
    by construction).  ``knot`` is the fixed knot of a fixed-knot bilinear
    outcome and ``None`` otherwise.
    """

    mean: np.ndarray
    psi: np.ndarray
    resid_var: float
    knot: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).copy())
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float).copy())
        object.__setattr__(self, "resid_var", float(self.resid_var))
        if self.knot is not None:
            object.__setattr__(self, "knot", float(self.knot))
        q = self.mean.shape[0]
        if self.psi.shape != (q, q):
            raise ValueError(f"psi must be {q}x{q}, got {self.psi.shape}")
        self.mean.flags.writeable = False
        self.psi.flags.writeable = False


@dataclass(frozen=True)
class ParamSet:
    outcomes: tuple[OutcomeParams, ...]
    cross_psi: np.ndarray | None = None
    resid_cov: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        if self.cross_psi is not None:
            c = np.asarray(self.cross_psi, dtype=float).copy()
            qy, qz = (o.mean.shape[0] for o in self.outcomes)
            if c.shape != (qy, qz):
                raise ValueError(f"cross_psi must be {qy}x{qz}, got {c.shape}")
            c.flags.writeable = False
            object.__setattr__(self, "cross_psi", c)
        elif len(self.outcomes) == 2:
            raise ValueError("two outcomes need a cross-outcome block")
        object.__setattr__(self, "resid_cov", float(self.resid_cov))

    def stacked_psi(self) -> np.ndarray:
        """Joint growth-factor covariance of all outcomes."""
        if len(self.outcomes) == 1:
            return self.outcomes[0].psi.copy()
        y, z = self.outcomes
        return np.block([[y.psi, self.cross_psi], [self.cross_psi.T, z.psi]])

    def resid_matrix(self) -> np.ndarray:
        if len(self.outcomes) == 1:
            return np.array([[self.outcomes[0].resid_var]])
        y, z = self.outcomes
        return np.array([[y.resid_var, self.resid_cov], [self.resid_cov, z.resid_var]])


class ReparamParams(ParamSet):
    """Estimable parameters (reparameterized frame)."""


class OriginalParams(ParamSet):
    """Interpretable parameters (intercept, two slopes, knot)."""


# ----------------------------------------------------------------------------
# trajectories and loadings


def bilinear_value(eta0, eta1, eta2, gamma, t):
    """Value of a linear-linear trajectory with knot ``gamma`` at time ``t``."""
    t = np.asarray(t, dtype=float)
    out = np.where(t <= gamma, eta0 + eta1 * t, eta0 + eta1 * gamma + eta2 * (t - gamma))
    return out if out.ndim else float(out)


def loadings_full(times, mu_gamma, mu_eta2_prime) -> np.ndarray:
    """Loadings ``[1, t - mu_g, |t - mu_g|, -m2' - m2' sign(t - mu_g)]``.

    ``sign(0)`` is taken as 0, so a cell observed exactly at the knot mean
    gets the average of the two one-sided knot loadings.  ``times`` may have
    any leading batch shape; the loading axis is appended last.
    """
    t = np.asarray(times, dtype=float)
    d = t - mu_gamma
    s = np.sign(d)
    return np.stack([np.ones_like(d), d, np.abs(d), -mu_eta2_prime * (1.0 + s)], axis=-1)


def loadings_reduced(times, gamma) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    d = t - gamma
    return np.stack([np.ones_like(d), d, np.abs(d)], axis=-1)


def loadings_polynomial(times, degree: int) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    return np.stack([t**k for k in range(degree + 1)], axis=-1)


def outcome_knot(shape: Shape, op: OutcomeParams) -> float | None:
    if shape is Shape.BILINEAR_RANDOM:
        return float(op.mean[3])
    if shape is Shape.BILINEAR_FIXED:
        return op.knot
    return None


def outcome_loadings(shape: Shape, times, op: OutcomeParams) -> np.ndarray:
    """Reparameterized-frame loadings of one outcome; polynomial shapes use raw time."""
    if shape is Shape.BILINEAR_RANDOM:
        return loadings_full(times, op.mean[3], op.mean[2])
    if shape is Shape.BILINEAR_FIXED:
        return loadings_reduced(times, op.knot)
    return loadings_polynomial(times, 1 if shape is Shape.LINEAR else 2)


def loading_mean(shape: Shape, op: OutcomeParams) -> np.ndarray:
    """Mean vector multiplied by the loadings (knot-deviation mean is 0)."""
    if shape is Shape.BILINEAR_RANDOM:
        return np.array([op.mean[0], op.mean[1], op.mean[2], 0.0])
    return np.asarray(op.mean, dtype=float)


def check_params(spec: ModelSpec, params: ParamSet) -> None:
    if len(params.outcomes) != len(spec.outcomes):
        raise ValueError(f"spec has {len(spec.outcomes)} outcomes, params have {len(params.outcomes)}")
    for o, op in zip(spec.outcomes, params.outcomes):
        if op.mean.shape[0] != o.shape.n_factors:
            raise ValueError(
                f"outcome {o.name!r} ({o.shape.value}) needs {o.shape.n_factors} growth factors, got {op.mean.shape[0]}"
            )
        if (o.shape is Shape.BILINEAR_FIXED) != (op.knot is not None):
            raise ValueError(f"outcome {o.name!r}: a fixed knot is required for, and only for, bilinear_fixed")


def implied_moments(spec: ModelSpec, times, params: ParamSet, mask=None):
    """Model-implied mean and covariance of one individual's stacked outcomes.

    The result is ordered outcome-major (all waves of ``y``, then of ``z``).
    When ``mask`` (n_outcomes x J) is given, unobserved cells are dropped.
    """
    check_params(spec, params)
    times = np.asarray(times, dtype=float)
    if times.shape != (spec.n_waves,):
        raise ValueError(f"expected {spec.n_waves} time points, got {times.shape}")
    lams = [outcome_loadings(o.shape, times, op) for o, op in zip(spec.outcomes, params.outcomes)]
    lam = _block_diag(lams)
    b = np.concatenate([loading_mean(o.shape, op) for o, op in zip(spec.outcomes, params.outcomes)])
    mean = lam @ b
    cov = lam @ params.stacked_psi() @ lam.T
    cov = 0.5 * (cov + cov.T) + np.kron(params.resid_matrix(), np.eye(spec.n_waves))
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        mean, cov = mean[keep], cov[np.ix_(keep, keep)]
    return mean, cov


def _block_diag(mats: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


# ----------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class Layout:
    """Positions of every free parameter in the flat vector used for estimation."""

    names: tuple[str, ...]
    knot_index: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.names)


def _mean_names(key: str, shape: Shape, prime: bool) -> list[str]:
    p = "'" if prime else ""
    if shape.is_bilinear:
        names = [f"{key}:mu_eta0{p}", f"{key}:mu_eta1{p}", f"{key}:mu_eta2{p}"]
        return names + [f"{key}:mu_gamma"]
    return [f"{key}:mu_{k}" for k in shape.factor_labels]


def layout(spec: ModelSpec, prime: bool = True) -> Layout:
    """Parameter names in packing order.

    Per outcome: means (the knot mean or fixed knot last for bilinear
    shapes), then the upper triangle of the covariance block.  Then the
    cross-outcome block (row-major), residual variances and the residual
    covariance.  Reparameterized growth-factor names carry a trailing prime.
    """
    names: list[str] = []
    knots: dict[str, int] = {}
    for key, o in zip(spec.keys, spec.outcomes):
        p = "'" if prime and o.shape.is_bilinear else ""
        mn = _mean_names(key, o.shape, prime)
        if o.shape.is_bilinear:
            knots[key] = len(names) + 3
        names += mn
        lab = o.shape.factor_labels
        for a in range(len(lab)):
            for b in range(a, len(lab)):
                pp = "" if (lab[a] == lab[b] == "g") else p
                names.append(f"{key}:psi_{lab[a]}{lab[b]}{pp}")
    if spec.parallel:
        p = "'" if prime and any(o.shape.is_bilinear for o in spec.outcomes) else ""
        ly, lz = (o.shape.factor_labels for o in spec.outcomes)
        for a in ly:
            for b in lz:
                pp = "" if (a == b == "g") else p
                names.append(f"yz:psi_{a}{b}{pp}")
    names += [f"{key}:theta" for key in spec.keys]
    if spec.parallel:
        names.append("yz:theta")
    return Layout(tuple(names), knots)


def pack(spec: ModelSpec, params: ParamSet) -> np.ndarray:
    check_params(spec, params)
    parts = []
    for o, op in zip(spec.outcomes, params.outcomes):
        if o.shape is Shape.BILINEAR_FIXED:
            parts.append(np.append(op.mean, op.knot))
        else:
            parts.append(op.mean)
        parts.append(op.psi[np.triu_indices(op.psi.shape[0])])
    if spec.parallel:
        parts.append(params.cross_psi.reshape(-1))
    parts.append([op.resid_var for op in params.outcomes])
    if spec.parallel:
        parts.append([params.resid_cov])
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack(spec: ModelSpec, vec, cls: type[ParamSet] = ReparamParams) -> ParamSet:
    vec = np.asarray(vec, dtype=float)
    need = len(layout(spec))
    if vec.shape != (need,):
        raise ValueError(f"parameter vector has shape {vec.shape}, the model needs ({need},)")
    pos = 0
    outcomes = []
    for o in spec.outcomes:
        q = o.shape.n_factors
        mean = vec[pos : pos + q]
        pos += q
        knot = None
        if o.shape is Shape.BILINEAR_FIXED:
            knot = vec[pos]
            pos += 1
        nt = q * (q + 1) // 2
        psi = np.zeros((q, q))
        psi[np.triu_indices(q)] = vec[pos : pos + nt]
        psi = psi + np.triu(psi, 1).T
        pos += nt
        outcomes.append([mean, psi, knot])
    cross = None
    if spec.parallel:
        qy, qz = (o.shape.n_factors for o in spec.outcomes)
        cross = vec[pos : pos + qy * qz].reshape(qy, qz)
        pos += qy * qz
    resid = vec[pos : pos + len(outcomes)]
    pos += len(outcomes)
    rcov = 0.0
    if spec.parallel:
        rcov = vec[pos]
        pos += 1
    if pos != vec.shape[0]:
        raise ValueError(f"parameter vector has {vec.shape[0]} entries, the model needs {pos}")
    ops = tuple(OutcomeParams(m, p, r, k) for (m, p, k), r in zip(outcomes, resid))
    return cls(ops, cross, rcov)
