from __future__ import annotations

import numpy as np
import pytest
from conftest import random_params, random_spec
from hypothesis import given, settings
from hypothesis import strategies as st

from pblsgm.model import (
    IndividualRecord,
    ModelSpec,
    OutcomeParams,
    OutcomeSpec,
    ReparamParams,
    Shape,
    bilinear_value,
    implied_moments,
    layout,
    loadings_full,
    loadings_reduced,
    loadings_polynomial,
    pack,
    unpack,
)


def test_bilinear_value_examples():
    assert bilinear_value(98, 5, 2.6, 2.5, 1.0) == pytest.approx(103.0, abs=1e-12)
    assert bilinear_value(98, 5, 2.6, 2.5, 4.0) == pytest.approx(114.4, abs=1e-12)


@given(
    st.floats(-100, 100),
    st.floats(-10, 10),
    st.floats(0, 20),
    st.floats(-5, 25),
)
def test_equal_slopes_give_a_line(e0, s, g, t):
    assert bilinear_value(e0, s, s, g, t) == pytest.approx(e0 + s * t, abs=1e-9)


def test_bilinear_value_is_continuous_at_knot():
    g = 3.3
    left = bilinear_value(1.0, 2.0, -1.0, g, g - 1e-12)
    right = bilinear_value(1.0, 2.0, -1.0, g, g + 1e-12)
    assert left == pytest.approx(right, abs=1e-9)


def test_full_loadings_examples():
    rows = loadings_full(np.array([0.0, 5.0, 2.5]), 2.5, -1.2)
    np.testing.assert_allclose(rows[0], [1, -2.5, 2.5, 0], atol=1e-15)
    np.testing.assert_allclose(rows[1], [1, 2.5, 2.5, 2.4], atol=1e-15)
    np.testing.assert_allclose(rows[2], [1, 0, 0, 1.2], atol=1e-15)


def test_reduced_loadings_examples():
    np.testing.assert_allclose(loadings_reduced(np.array([2.5]), 2.5), [[1, 0, 0]])
    np.testing.assert_allclose(loadings_reduced(np.array([0.0]), 2.5), [[1, -2.5, 2.5]])
    np.testing.assert_allclose(loadings_reduced(np.array([4.5]), 2.5), [[1, 2, 2]])


def test_polynomial_loadings():
    np.testing.assert_allclose(loadings_polynomial(np.array([2.0]), 2), [[1, 2, 4]])
    np.testing.assert_allclose(loadings_polynomial(np.array([2.0]), 1), [[1, 2]])


def test_loadings_reproduce_the_bilinear_curve():
    # reparameterized mean times full loadings is the curve itself at the mean knot
    m = np.array([110.5, 3.8, -1.2, 2.5])
    t = np.linspace(0, 9, 37)
    lam = loadings_full(t, 2.5, -1.2)
    np.testing.assert_allclose(lam @ np.append(m[:3], 0.0), bilinear_value(98, 5, 2.6, 2.5, t), atol=1e-12)


def _scenario1_params():
    y = OutcomeParams([110.5, 3.8, -1.2, 2.5], np.eye(4) * 0.1, 1.0)
    z = OutcomeParams([114.5, 3.8, -1.2, 2.5], np.eye(4) * 0.1, 1.0)
    return ReparamParams((y, z), np.zeros((4, 4)), 0.3)


def test_implied_mean_at_the_knot():
    spec = ModelSpec.parallel_bilinear(6)
    times = np.array([0.0, 1.0, 2.5, 3.0, 4.0, 5.0])
    mean, _ = implied_moments(spec, times, _scenario1_params())
    assert mean[2] == pytest.approx(110.5, abs=1e-12)


def _dense_oracle(spec, times, params):
    """Element-by-element construction of the implied moments."""
    J = spec.n_waves
    K = len(spec.outcomes)
    rows = []
    for o, op in zip(spec.outcomes, params.outcomes):
        for t in times:
            if o.shape is Shape.BILINEAR_RANDOM:
                g, m2 = op.mean[3], op.mean[2]
                d = t - g
                rows.append([1.0, d, abs(d), -m2 * (1 + np.sign(d))])
            elif o.shape is Shape.BILINEAR_FIXED:
                d = t - op.knot
                rows.append([1.0, d, abs(d)])
            else:
                rows.append([t**p for p in range(o.shape.n_factors)])
    psi = params.stacked_psi()
    resid = params.resid_matrix()
    sizes = [o.shape.n_factors for o in spec.outcomes]
    offs = np.cumsum([0] + sizes)
    mu = np.zeros(K * J)
    cov = np.zeros((K * J, K * J))
    for a in range(K * J):
        ka = a // J
        la = np.zeros(offs[-1])
        la[offs[ka] : offs[ka + 1]] = rows[a]
        mvec = np.concatenate([np.r_[op.mean[:3], 0.0] if o.shape is Shape.BILINEAR_RANDOM else op.mean
                               for o, op in zip(spec.outcomes, params.outcomes)])
        mu[a] = la @ mvec
        for b in range(K * J):
            kb = b // J
            lb = np.zeros(offs[-1])
            lb[offs[kb] : offs[kb + 1]] = rows[b]
            cov[a, b] = la @ psi @ lb + (resid[ka, kb] if a % J == b % J else 0.0)
    return mu, cov


def test_implied_moments_match_elementwise_oracle(rng):
    for _ in range(30):
        spec = random_spec(rng)
        params = random_params(rng, spec)
        times = np.sort(rng.uniform(0, spec.n_waves, spec.n_waves))
        mu, cov = implied_moments(spec, times, params)
        mo, co = _dense_oracle(spec, times, params)
        np.testing.assert_allclose(mu, mo, atol=1e-10)
        np.testing.assert_allclose(cov, co, atol=1e-10)


def test_implied_moments_mask_drops_cells(rng):
    spec = ModelSpec.parallel_bilinear(5)
    params = random_params(rng, spec)
    times = np.arange(5.0)
    mask = np.array([[1, 0, 1, 1, 0], [0, 1, 1, 1, 1]], dtype=bool)
    mu, cov = implied_moments(spec, times, params)
    mm, cm = implied_moments(spec, times, params, mask)
    keep = mask.reshape(-1)
    np.testing.assert_array_equal(mm, mu[keep])
    np.testing.assert_array_equal(cm, cov[np.ix_(keep, keep)])


def test_implied_covariance_is_symmetric(rng):
    spec = ModelSpec.parallel_bilinear(7)
    _, cov = implied_moments(spec, np.arange(7.0), random_params(rng, spec))
    np.testing.assert_array_equal(cov, cov.T)


@pytest.mark.parametrize(
    "spec, k",
    [
        (ModelSpec.parallel_bilinear(10), 47),
        (ModelSpec.parallel_bilinear(10, False, False), 32),
        (ModelSpec.parallel_bilinear(10, True, False), 39),
        (ModelSpec((OutcomeSpec("y", Shape.LINEAR), OutcomeSpec("z", Shape.LINEAR)), 10), 17),
        (ModelSpec((OutcomeSpec("y", Shape.BILINEAR_RANDOM),), 9), 15),
        (ModelSpec((OutcomeSpec("y", Shape.BILINEAR_FIXED),), 9), 11),
        (ModelSpec((OutcomeSpec("y", Shape.QUADRATIC),), 9), 10),
        (ModelSpec((OutcomeSpec("y", Shape.LINEAR),), 9), 6),
    ],
)
def test_parameter_counts(spec, k):
    assert len(layout(spec)) == k


def test_layout_names_are_unique_and_primed_only_for_bilinear():
    spec = ModelSpec((OutcomeSpec("y", Shape.BILINEAR_RANDOM), OutcomeSpec("z", Shape.LINEAR)), 6)
    names = layout(spec).names
    assert len(set(names)) == len(names)
    assert "y:mu_eta0'" in names and "y:psi_gg" in names and "z:mu_0" in names
    assert not any(n.startswith("z:") and "'" in n for n in names)
    assert "y:mu_eta0" in layout(spec, prime=False).names


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pack_unpack_round_trip(seed):
    r = np.random.default_rng(seed)
    spec = random_spec(r)
    params = random_params(r, spec)
    vec = pack(spec, params)
    assert vec.size == len(layout(spec))
    np.testing.assert_array_equal(pack(spec, unpack(spec, vec)), vec)


def test_unpack_rejects_wrong_length():
    spec = ModelSpec.parallel_bilinear(6)
    with pytest.raises(ValueError):
        unpack(spec, np.zeros(46))


def test_record_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        IndividualRecord.complete("a", [0, 2, 1], [[1, 2, 3]])
    with pytest.raises(ValueError, match="no observed"):
        IndividualRecord("a", [0, 1], [[1, 2]], [[False, False]])
    with pytest.raises(ValueError, match="not finite"):
        IndividualRecord.complete("a", [0, 1], [[1, np.inf]])
    rec = IndividualRecord("a", [0, 1, np.nan], [[1, 2, 99]], [[True, True, False]])
    assert np.isnan(rec.values[0, 2])


def test_params_reject_mismatched_shapes():
    spec = ModelSpec.parallel_bilinear(6)
    with pytest.raises(ValueError):
        OutcomeParams([1, 2, 3], np.eye(4), 1.0)
    bad = ReparamParams((OutcomeParams([1, 2, 3], np.eye(3), 1.0, None),) * 2, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        implied_moments(spec, np.arange(6.0), bad)
