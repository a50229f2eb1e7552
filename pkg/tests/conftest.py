from __future__ import annotations

import numpy as np
import pytest

from pblsgm.model import ModelSpec, OutcomeParams, OutcomeSpec, ReparamParams, Shape

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def random_psd(rng, q, scale=1.0, rank=None):
    a = rng.standard_normal((q, rank or q + 2)) * scale
    return a @ a.T / a.shape[1]


def random_params(rng, spec: ModelSpec, psd: bool = True) -> ReparamParams:
    """A random parameter set valid for ``spec``; knots sit inside [1, J-2]."""
    q = [o.shape.n_factors for o in spec.outcomes]
    scales = []
    for o in spec.outcomes:
        s = {Shape.BILINEAR_RANDOM: [3, 0.6, 0.4, 0.25], Shape.BILINEAR_FIXED: [3, 0.6, 0.4]}.get(
            o.shape, [3, 0.6, 0.2][: o.shape.n_factors]
        )
        scales += s
    d = np.array(scales)
    cov = random_psd(rng, sum(q)) * np.outer(d, d) if psd else rng.standard_normal((sum(q), sum(q)))
    cov = 0.5 * (cov + cov.T)
    outs, pos = [], 0
    for o, k in zip(spec.outcomes, q):
        mean = rng.normal(0, 2, k)
        mean[0] += 50
        knot = None
        if o.shape is Shape.BILINEAR_RANDOM:
            mean[3] = rng.uniform(1.0, spec.n_waves - 2.0)
        elif o.shape is Shape.BILINEAR_FIXED:
            knot = rng.uniform(1.0, spec.n_waves - 2.0)
        outs.append(OutcomeParams(mean, cov[pos : pos + k, pos : pos + k], rng.uniform(0.5, 2.0), knot))
        pos += k
    cross = cov[: q[0], q[0] :] if spec.parallel else None
    rcov = rng.uniform(-0.3, 0.3) * np.sqrt(outs[0].resid_var * outs[-1].resid_var) if spec.parallel else 0.0
    return ReparamParams(tuple(outs), cross, rcov)


SHAPES = (Shape.BILINEAR_RANDOM, Shape.BILINEAR_FIXED, Shape.LINEAR, Shape.QUADRATIC)


def random_spec(rng, n_waves=None) -> ModelSpec:
    J = n_waves or int(rng.integers(4, 8))
    k = int(rng.integers(1, 3))
    outs = tuple(OutcomeSpec(key, SHAPES[int(rng.integers(4))]) for key in ("y", "z")[:k])
    return ModelSpec(outs, J)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
