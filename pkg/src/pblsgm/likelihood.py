"""Full-information maximum likelihood for individually-varying occasions.

Each individual contributes the exact multivariate normal log density of the
cells it has observed.  Individuals sharing an observation pattern are
evaluated together as one batch of small dense matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (
    IndividualRecord,
    ModelSpec,
    ParamSet,
    Shape,
    implied_moments,
    layout,
    loading_mean,
    outcome_knot,
    outcome_loadings,
    pack,
    unpack,
)

LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(ArithmeticError):
    """An implied covariance matrix could not be Cholesky-factorized."""


def loglik_individual(record: IndividualRecord, spec: ModelSpec, params: ParamSet) -> float:
    mask = record.mask & spec.template_mask()
    if not mask.any():
        return 0.0
    mean, cov = implied_moments(spec, record.times, params, mask)
    x = record.values[mask]
    try:
        c = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"record {record.id}: implied covariance is not positive definite") from exc
    r = x - mean
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * (r.size * LOG_2PI + logdet + r @ cho_solve(c, r)))


def loglik_sample(data: Sequence[IndividualRecord], spec: ModelSpec, params: ParamSet) -> float:
    return FIMLObjective(data, spec).loglik(pack(spec, params))


@dataclass
class _Group:
    index: np.ndarray  # positions in the input sequence
    times: np.ndarray  # (n_g, J)
    x: np.ndarray  # (n_g, m)
    obs: np.ndarray  # (K*J,) boolean
    rows: list  # per outcome: observed positions belonging to it
    waves: list  # per outcome: wave index of each of those positions
    pairs: np.ndarray  # (p, 2) observed positions of y/z cells sharing a wave


class FIMLObjective:
    """Sample log-likelihood and its gradient over the packed parameter vector."""

    def __init__(self, data: Sequence[IndividualRecord], spec: ModelSpec):
        if len(data) == 0:
            raise ValueError("no individuals")
        self.spec = spec
        self.layout = layout(spec)
        self.n = len(data)
        K, J = len(spec.outcomes), spec.n_waves
        template = spec.template_mask()
        patterns: dict[bytes, list[int]] = {}
        for i, rec in enumerate(data):
            if rec.values.shape != (K, J):
                raise ValueError(f"record {rec.id}: expected {K} outcome(s) x {J} waves, got {rec.values.shape}")
            m = (rec.mask & template).reshape(-1)
            patterns.setdefault(m.tobytes(), []).append(i)
        self.groups: list[_Group] = []
        for key, idx in patterns.items():
            obs = np.frombuffer(key, dtype=bool).copy()
            if not obs.any():
                continue
            idx = np.array(idx)
            times = np.stack([data[i].times for i in idx])
            x = np.stack([data[i].values.reshape(-1)[obs] for i in idx])
            pos = np.cumsum(obs) - 1
            rows, waves = [], []
            for k in range(K):
                cells = np.flatnonzero(obs[k * J : (k + 1) * J])
                rows.append(pos[k * J + cells])
                waves.append(cells)
            pairs = np.zeros((0, 2), dtype=int)
            if K == 2:
                both = np.flatnonzero(obs[:J] & obs[J:])
                pairs = np.stack([pos[both], pos[J + both]], axis=1)
            self.groups.append(_Group(idx, times, x, obs, rows, waves, pairs))
        self._build_index()

    def _build_index(self):
        spec = self.spec
        self.q = [o.shape.n_factors for o in spec.outcomes]
        self.offsets = np.concatenate([[0], np.cumsum(self.q)])[:-1].tolist()
        self.Q = sum(self.q)
        pos = 0
        self.mean_pos, self.knot_pos, self.psi_pos = [], [], []
        for o, q in zip(spec.outcomes, self.q):
            self.mean_pos.append(pos)
            pos += q
            if o.shape is Shape.BILINEAR_FIXED:
                self.knot_pos.append(pos)
                pos += 1
            elif o.shape is Shape.BILINEAR_RANDOM:
                self.knot_pos.append(pos - 1)
            else:
                self.knot_pos.append(None)
            self.psi_pos.append(pos)
            pos += q * (q + 1) // 2
        self.cross_pos = pos if spec.parallel else None
        if spec.parallel:
            pos += self.q[0] * self.q[1]
        self.resid_pos = pos
        self.size = pos + len(self.q) + (1 if spec.parallel else 0)
        assert self.size == len(self.layout)

    # ------------------------------------------------------------------

    def _evaluate(self, theta, want_grad: bool):
        spec = self.spec
        params = unpack(spec, theta)
        psi = params.stacked_psi()
        resid = params.resid_matrix()
        b = np.concatenate([loading_mean(o.shape, op) for o, op in zip(spec.outcomes, params.outcomes)])
        knots = [outcome_knot(o.shape, op) for o, op in zip(spec.outcomes, params.outcomes)]
        J = spec.n_waves
        R_full = np.kron(resid, np.eye(J))
        contrib = np.empty(self.n)
        if want_grad:
            D = np.zeros((self.Q, self.Q))
            gb = np.zeros(self.Q)
            gk = np.zeros(len(self.q))
            gm2 = np.zeros(len(self.q))
            gres = np.zeros(len(self.q))
            gcov = 0.0
        for g in self.groups:
            ng = g.times.shape[0]
            lam = np.zeros((ng, len(self.q) * J, self.Q))
            for k, (o, op) in enumerate(zip(spec.outcomes, params.outcomes)):
                lam[:, k * J : (k + 1) * J, self.offsets[k] : self.offsets[k] + self.q[k]] = outcome_loadings(
                    o.shape, g.times, op
                )
            lam = lam[:, g.obs, :]
            m = lam.shape[1]
            mu = lam @ b
            R = R_full[np.ix_(g.obs, g.obs)]
            S = lam @ psi @ lam.transpose(0, 2, 1) + R
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite("implied covariance is not positive definite") from exc
            logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
            r = g.x - mu
            if not want_grad:
                alpha = np.linalg.solve(S, r[:, :, None])[:, :, 0]
                contrib[g.index] = -0.5 * (m * LOG_2PI + logdet + np.einsum("ni,ni->n", r, alpha))
                continue
            # Woodbury: S^-1 = R^-1 - A W A^T with A = R^-1 lam, W = (I + psi M)^-1 psi, M = lam^T A
            try:
                Rinv = np.linalg.inv(R)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite("residual covariance is singular") from exc
            A = Rinv @ lam
            M = lam.transpose(0, 2, 1) @ A
            W = np.linalg.solve(np.eye(self.Q) + psi @ M, np.broadcast_to(psi, M.shape))
            W = 0.5 * (W + W.transpose(0, 2, 1))
            Rr = r @ Rinv
            AW = A @ W
            alpha = Rr - np.einsum("nmq,nq->nm", AW, np.einsum("nmq,nm->nq", A, r))
            contrib[g.index] = -0.5 * (m * LOG_2PI + logdet + np.einsum("ni,ni->n", r, alpha))
            v = np.einsum("nmq,nm->nq", lam, alpha)
            WM = W @ M
            D += 0.5 * (v.T @ v - (M - M @ WM).sum(axis=0))
            gb += v.sum(axis=0)
            sinv_lam = A - A @ WM
            dlam = alpha[:, :, None] * b[None, None, :] + (alpha[:, :, None] * v[:, None, :] - sinv_lam) @ psi
            diag_sinv = np.diag(Rinv)[None, :] - np.einsum("nmq,nmq->nm", AW, A)
            diagG = 0.5 * (alpha**2 - diag_sinv)
            for k, o in enumerate(spec.outcomes):
                rows = g.rows[k]
                gres[k] += diagG[:, rows].sum()
                if not o.shape.is_bilinear or rows.size == 0:
                    continue
                c = self.offsets[k]
                s = np.sign(g.times[:, g.waves[k]] - knots[k])
                gk[k] -= dlam[:, rows, c + 1].sum() + (s * dlam[:, rows, c + 2]).sum()
                if o.shape is Shape.BILINEAR_RANDOM:
                    gm2[k] -= ((1.0 + s) * dlam[:, rows, c + 3]).sum()
            if g.pairs.size:
                p, q = g.pairs[:, 0], g.pairs[:, 1]
                sinv_pq = Rinv[p, q][None, :] - np.einsum("nkq,nkq->nk", AW[:, p, :], A[:, q, :])
                gcov += (alpha[:, p] * alpha[:, q] - sinv_pq).sum()
        if not np.all(np.isfinite(contrib)):
            raise NotPositiveDefinite("non-finite log-likelihood contribution")
        if not want_grad:
            return contrib, None
        grad = np.zeros(self.size)
        Ds = 0.5 * (D + D.T)
        for k, o in enumerate(spec.outcomes):
            c, q, p = self.offsets[k], self.q[k], self.mean_pos[k]
            nfree = 3 if o.shape.is_bilinear else q
            grad[p : p + nfree] = gb[c : c + nfree]
            if o.shape.is_bilinear:
                grad[self.knot_pos[k]] += gk[k]
            if o.shape is Shape.BILINEAR_RANDOM:
                grad[p + 2] += gm2[k]
            iu = np.triu_indices(q)
            grad[self.psi_pos[k] : self.psi_pos[k] + iu[0].size] = Ds[c + iu[0], c + iu[1]] * np.where(
                iu[0] == iu[1], 1.0, 2.0
            )
        if spec.parallel:
            cy, cz = self.offsets
            block = 2.0 * Ds[cy : cy + self.q[0], cz : cz + self.q[1]]
            grad[self.cross_pos : self.cross_pos + block.size] = block.reshape(-1)
            grad[self.resid_pos + 2] = gcov
        grad[self.resid_pos : self.resid_pos + len(self.q)] = gres
        return contrib, grad

    def contributions(self, theta) -> np.ndarray:
        """Per-individual log-likelihood, in input order."""
        return self._evaluate(np.asarray(theta, dtype=float), False)[0]

    def loglik(self, theta) -> float:
        return math.fsum(self.contributions(theta))

    def loglik_and_grad(self, theta):
        contrib, grad = self._evaluate(np.asarray(theta, dtype=float), True)
        return math.fsum(contrib), grad
