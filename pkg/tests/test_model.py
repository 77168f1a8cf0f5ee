import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import expm_series, make_model, model_a
from dscbi.errors import InvalidMeasureAtom, InvalidParameter, NonPositiveEigenvalue, NotDoublySymmetric, NotIrreducible
from dscbi.model import (
    Criticality,
    JumpMeasure,
    build_derived,
    classify,
    derived_from,
    expm_tB,
    h_forward,
    h_inverse,
    integral_expm,
    integral_of_power,
)

E2 = math.exp(-2.0)


def test_derived_quantities_of_perron_immigration_model():
    d = build_derived(model_a())
    assert d.gamma == -1.0 and d.kappa == 1.0 and d.s == 0.0
    assert d.rho == 1.0
    assert d.delta == pytest.approx(0.1353353, abs=1e-7)
    np.testing.assert_allclose(d.tbeta, [1.5, 1.5], atol=1e-15)
    np.testing.assert_allclose(d.obeta, [1.5, 1.5], atol=1e-15)


def test_branching_atom_shifts_offdiagonal_entry():
    p = make_model(beta=(0.5, 0.5), nu=[(1, 1, 1)], mu1=[(0, 1, 0.3)])
    from dscbi.model import modified_branching_matrix

    tB = modified_branching_matrix(p)
    assert tB[1, 0] == pytest.approx(1.3, abs=1e-15)
    assert tB[0, 0] == -1.0


def test_zero_immigration_gives_zero_means():
    d = build_derived(make_model())
    assert np.all(d.tbeta == 0) and np.all(d.obeta == 0)


def test_jump_measure_rejects_bad_atoms():
    for atom in [(0, 0, 1), (-1, 1, 1), (1, 1, 0), (1, 1, -2), (1, math.inf, 1)]:
        with pytest.raises(InvalidMeasureAtom):
            JumpMeasure([atom])


def test_jump_measure_is_immutable_and_picklable():
    m = JumpMeasure([(1, 2, 0.5)])
    with pytest.raises(AttributeError):
        m.z = None
    m2 = pickle.loads(pickle.dumps(m))
    assert m2.atoms == m.atoms


def test_parameter_validation():
    with pytest.raises(InvalidParameter):
        make_model(c=(-1, 0))
    with pytest.raises(InvalidParameter):
        make_model(beta=(0, -0.1))
    with pytest.raises(InvalidParameter):
        make_model(B=[[-1, -1], [1, -1]])
    with pytest.raises(NotDoublySymmetric):
        build_derived(make_model(B=[[-1, 1], [1, -2]]))
    with pytest.raises(NotIrreducible):
        build_derived(make_model(B=[[-1, 0], [0, -1]]))


def test_expm_examples():
    d = derived_from(-1.0, 1.0, [1.5, 1.5])
    np.testing.assert_array_equal(expm_tB(d, 0.0), np.eye(2))
    np.testing.assert_allclose(expm_tB(d, 1.0), [[0.5676676, 0.4323324], [0.4323324, 0.5676676]], atol=1e-7)
    np.testing.assert_allclose(np.ones(2) @ expm_tB(d, 0.7), [1.0, 1.0], atol=1e-12)


def test_expm_matches_series_oracle(rng):
    for _ in range(50):
        g, k = rng.uniform(-3, 3), rng.uniform(0.01, 3)
        t = rng.uniform(0, 10 / (abs(g) + k))
        d = derived_from(g, k, [0, 0])
        A = expm_series(t * np.asarray(d.tB))
        np.testing.assert_allclose(expm_tB(d, t), A, rtol=1e-12, atol=1e-12 * np.abs(A).max())


def test_expm_semigroup_and_eigenvectors(rng):
    d = derived_from(-1.0, 1.0, [0, 0])
    for s, t in rng.uniform(0, 5, (100, 2)):
        np.testing.assert_allclose(expm_tB(d, s + t), expm_tB(d, s) @ expm_tB(d, t), atol=1e-12)
    u, v = np.ones(2), np.array([1.0, -1.0])
    for t in np.arange(1, 51) / 10:
        np.testing.assert_allclose(u @ expm_tB(d, t), d.rho**t * u, atol=1e-12)
        np.testing.assert_allclose(v @ expm_tB(d, t), d.delta**t * v, atol=1e-12)


def test_integral_expm_against_quadrature():
    from scipy.integrate import quad

    d = derived_from(-0.7, 0.4, [0, 0])
    ref = np.array([[quad(lambda s: expm_tB(d, s)[i, j], 0, 1.3, epsabs=1e-14)[0] for j in range(2)] for i in range(2)])
    np.testing.assert_allclose(integral_expm(d, 1.3), ref, atol=1e-12)


def test_integral_of_power_branch_is_continuous():
    for l in (1e-9, -1e-9, 1e-7, -1e-7, 0.0):
        ref = math.expm1(l) / l if l else 1.0
        assert integral_of_power(l) == pytest.approx(ref, rel=1e-15)
    assert integral_of_power(-2.0) == pytest.approx((1 - E2) / 2, rel=1e-15)


def test_classify():
    assert classify(derived_from(-1, 1, [0, 0])) is Criticality.CRITICAL
    assert classify(derived_from(-2, 1, [0, 0])) is Criticality.SUBCRITICAL
    assert classify(derived_from(-0.5, 1, [0, 0])) is Criticality.SUPERCRITICAL
    with pytest.warns(RuntimeWarning):
        classify(derived_from(-1.0, 1.0 + 1e-8, [0, 0]))


def test_h_examples():
    rho, delta, ob = h_forward(-1, 1, [1.5, 1.5])
    assert rho == 1.0 and delta == pytest.approx(E2, rel=1e-15)
    np.testing.assert_allclose(ob, [1.5, 1.5], atol=1e-15)
    rho, delta, ob = h_forward(0, 0, [0.3, 0.9])
    assert (rho, delta) == (1.0, 1.0)
    np.testing.assert_allclose(ob, [0.3, 0.9], atol=1e-15)
    g, k, tb = h_inverse(1, 0.25, [1, 1])
    assert g == pytest.approx(-0.6931472, abs=1e-7) and k == pytest.approx(0.6931472, abs=1e-7)
    np.testing.assert_allclose(tb, [1, 1], atol=1e-15)
    g, k, tb = h_inverse(1, 1, [0.2, 0.4])
    assert (g, k) == (0.0, 0.0)
    np.testing.assert_allclose(tb, [0.2, 0.4], atol=1e-15)
    g, k, tb = h_inverse(1, E2, [1.5, 1.5])
    assert g == pytest.approx(-1, abs=1e-15) and k == pytest.approx(1, abs=1e-15)
    with pytest.raises(NonPositiveEigenvalue):
        h_inverse(0.0, 0.5, [1, 1])


def test_h_round_trip_example():
    x = (-0.3, 0.8, np.array([0.2, 0.7]))
    g, k, tb = h_inverse(*h_forward(*x))
    assert g == pytest.approx(x[0], abs=1e-12) and k == pytest.approx(x[1], abs=1e-12)
    np.testing.assert_allclose(tb, x[2], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-3, 3),
    st.floats(0.01, 3),
    st.floats(0, 5),
    st.floats(0, 5),
)
def test_h_round_trip_property(g, k, b1, b2):
    tb = np.array([b1, b2])
    g2, k2, tb2 = h_inverse(*h_forward(g, k, tb))
    assert abs(g2 - g) < 1e-12 and abs(k2 - k) < 1e-12
    np.testing.assert_allclose(tb2, tb, atol=1e-11, rtol=1e-12)
    rho, delta, ob = h_forward(g, k, tb)
    rho2, delta2, ob2 = h_forward(g2, k2, tb2)
    assert abs(rho2 - rho) <= 1e-12 * rho and abs(delta2 - delta) <= 1e-12 * delta
    np.testing.assert_allclose(ob2, ob, atol=1e-12, rtol=1e-12)


def test_critical_construction_is_exact(rng):
    for g in rng.uniform(-5, -0.01, 50):
        assert abs(derived_from(g, -g, [0, 0]).s) <= 1e-15
