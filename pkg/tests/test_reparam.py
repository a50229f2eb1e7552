from __future__ import annotations

import numpy as np
import pytest
from conftest import random_psd
from hypothesis import given, settings
from hypothesis import strategies as st

from pblsgm.model import ModelSpec, OriginalParams, OutcomeParams, OutcomeSpec, ReparamParams, Shape
from pblsgm.reparam import (
    Direction,
    forward_mean,
    grad_forward,
    grad_inverse,
    inverse_cov_percell,
    inverse_mean,
    to_original,
    to_reparam,
    transform_cov,
)
from pblsgm.simulation import SimulationCondition

finite = st.floats(-50, 50, allow_nan=False)


def test_forward_mean_examples():
    np.testing.assert_allclose(forward_mean([98, 5, 2.6, 2.5]), [110.5, 3.8, -1.2, 0], atol=1e-12)
    np.testing.assert_allclose(forward_mean([7, 1.5, 1.5, 3]), [11.5, 1.5, 0, 0], atol=1e-12)
    np.testing.assert_array_equal(forward_mean([0, 0, 0, 4.0]), [0, 0, 0, 0])


def test_inverse_mean_examples():
    np.testing.assert_allclose(inverse_mean([110.5, 3.8, -1.2], 2.5), [98, 5, 2.6, 2.5], atol=1e-12)
    np.testing.assert_allclose(inverse_mean([4.0, 0, 0], 3.3), [4.0, 0, 0, 3.3], atol=1e-15)


@settings(max_examples=200)
@given(finite, finite, finite, st.floats(0, 20))
def test_mean_round_trip(e0, e1, e2, g):
    back = inverse_mean(forward_mean([e0, e1, e2, g]), g)
    np.testing.assert_allclose(back, [e0, e1, e2, g], rtol=1e-12, atol=1e-10)


def test_grad_forward_first_row():
    j = grad_forward([98, 5, 2.6, 2.5])
    assert j.direction is Direction.FORWARD
    np.testing.assert_array_equal(j.matrix[0], [1, 2.5, 0, 5])
    np.testing.assert_array_equal(j.matrix[1:], [[0, 0.5, 0.5, 0], [0, -0.5, 0.5, 0], [0, 0, 0, 1]])


def test_grad_forward_matches_finite_differences(rng):
    def f(v):
        # deviation mean treated as gamma - mu_gamma: the fourth output tracks gamma
        out = forward_mean(v)
        out[3] = v[3]
        return out

    for _ in range(100):
        mu = rng.normal(0, 3, 4)
        h = 1e-5
        fd = np.column_stack([(f(mu + h * e) - f(mu - h * e)) / (2 * h) for e in np.eye(4)])
        np.testing.assert_allclose(grad_forward(mu).matrix, fd, atol=1e-6)


def test_grad_inverse_is_exact_inverse(rng):
    for _ in range(100):
        mu = rng.normal(0, 3, 4)
        mp = forward_mean(mu)
        prod = grad_forward(mu).matrix @ grad_inverse(mp, mu[3]).matrix
        np.testing.assert_allclose(prod, np.eye(4), atol=1e-12)


def test_grad_inverse_first_row():
    m = grad_inverse([110.5, 3.8, -1.2], 2.5).matrix
    np.testing.assert_array_equal(m[0, :3], [1, -2.5, 2.5])
    # knot-deviation entry: minus the first-slope mean, mu1' - mu2' = 5
    assert m[0, 3] == pytest.approx(-5.0, abs=1e-14)
    np.testing.assert_array_equal(m[1:], [[0, 1, -1, 0], [0, 1, 1, 0], [0, 0, 0, 1]])


def test_reduced_jacobian_block():
    j = grad_forward([98, 5, 2.6, 2.5]).reduced()
    np.testing.assert_array_equal(j.matrix, grad_forward([98, 5, 2.6, 2.5]).matrix[:3, :3])


def _design_y_block():
    return SimulationCondition(200, 6, (2.5, 2.5), 0.3, 1, 1.0).factor_cov()[:4, :4]


def test_worked_delta_example():
    psi = _design_y_block()
    jac = grad_forward([98, 5, 2.6, 2.5])
    out, _, _ = transform_cov(psi, None, None, jac, None)
    # hand-derived: (1 + 1 + 2*0.3) / 4, (1 + 1 - 2*0.3) / 4 and
    # 25 + 2*2.5*1.5 + 2*5*0.45 + 6.25 + 2.25 + 2.25
    assert out[1, 1] == pytest.approx(0.65, abs=1e-12)
    assert out[2, 2] == pytest.approx(0.35, abs=1e-12)
    assert out[3, 3] == pytest.approx(0.09, abs=1e-12)
    assert out[0, 0] == pytest.approx(47.75, abs=1e-12)


def test_identity_jacobians_leave_blocks_unchanged(rng):
    py, pz = random_psd(rng, 4), random_psd(rng, 3)
    pyz = rng.standard_normal((4, 3))
    a, b, c = transform_cov(py, pz, pyz, np.eye(4), np.eye(3))
    np.testing.assert_array_equal(a, py)
    np.testing.assert_array_equal(b, pz)
    np.testing.assert_array_equal(c, pyz)


def test_transform_cov_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        transform_cov(np.eye(3), None, None, np.eye(4), None)


def _random_original(rng, shapes=(Shape.BILINEAR_RANDOM, Shape.BILINEAR_RANDOM)):
    q = [s.n_factors for s in shapes]
    cov = random_psd(rng, sum(q))
    outs, pos = [], 0
    for s, k in zip(shapes, q):
        mean = rng.normal(0, 5, k)
        knot = None
        if s is Shape.BILINEAR_RANDOM:
            mean[3] = rng.uniform(1, 8)
        elif s is Shape.BILINEAR_FIXED:
            knot = rng.uniform(1, 8)
        outs.append(OutcomeParams(mean, cov[pos : pos + k, pos : pos + k], rng.uniform(0.5, 2), knot))
        pos += k
    cross = cov[: q[0], q[0] :] if len(shapes) == 2 else None
    spec = ModelSpec(tuple(OutcomeSpec(key, s) for key, s in zip("yz", shapes)), 10)
    return spec, OriginalParams(tuple(outs), cross, 0.2 if len(shapes) == 2 else 0.0)


@pytest.mark.parametrize(
    "shapes",
    [
        (Shape.BILINEAR_RANDOM, Shape.BILINEAR_RANDOM),
        (Shape.BILINEAR_FIXED, Shape.BILINEAR_FIXED),
        (Shape.BILINEAR_RANDOM, Shape.BILINEAR_FIXED),
        (Shape.BILINEAR_RANDOM,),
        (Shape.LINEAR, Shape.QUADRATIC),
    ],
)
def test_parameter_set_round_trip(rng, shapes):
    for _ in range(50):
        spec, orig = _random_original(rng, shapes)
        back = to_original(spec, to_reparam(spec, orig))
        assert isinstance(back, OriginalParams)
        for a, b in zip(orig.outcomes, back.outcomes):
            np.testing.assert_allclose(b.mean, a.mean, atol=1e-10)
            np.testing.assert_allclose(b.psi, a.psi, atol=1e-10)
        if orig.cross_psi is not None:
            np.testing.assert_allclose(back.cross_psi, orig.cross_psi, atol=1e-10)


def test_polynomial_outcomes_pass_through(rng):
    spec, orig = _random_original(rng, (Shape.LINEAR, Shape.QUADRATIC))
    rep = to_reparam(spec, orig)
    assert isinstance(rep, ReparamParams)
    np.testing.assert_array_equal(rep.outcomes[0].mean, orig.outcomes[0].mean)
    np.testing.assert_array_equal(rep.cross_psi, orig.cross_psi)


def test_percell_matches_matrix_route(rng):
    spec = ModelSpec.parallel_bilinear(10)
    for _ in range(200):
        _, orig = _random_original(rng)
        rep = to_reparam(spec, orig)
        a, b = to_original(spec, rep), inverse_cov_percell(rep)
        for x, y in zip(a.outcomes, b.outcomes):
            np.testing.assert_allclose(y.mean, x.mean, atol=1e-10)
            np.testing.assert_allclose(y.psi, x.psi, atol=1e-10)
        np.testing.assert_allclose(b.cross_psi, a.cross_psi, atol=1e-10)


def test_percell_slope_variance_example():
    psi = np.diag([1.0, 0.65, 0.35, 0.09])
    rep = ReparamParams((OutcomeParams([110.5, 3.8, -1.2, 2.5], psi, 1.0),))
    out = inverse_cov_percell(rep)
    assert out.outcomes[0].psi[1, 1] == pytest.approx(1.0, abs=1e-14)
    assert out.outcomes[0].psi[3, 3] == 0.09


def test_percell_rejects_fixed_knot():
    rep = ReparamParams((OutcomeParams([1, 2, 3], np.eye(3), 1.0, 2.0),))
    with pytest.raises(ValueError):
        inverse_cov_percell(rep)


def test_psd_is_preserved(rng):
    spec = ModelSpec.parallel_bilinear(10)
    for _ in range(50):
        _, orig = _random_original(rng)
        w = np.linalg.eigvalsh(to_reparam(spec, orig).stacked_psi())
        assert w.min() > -1e-9
