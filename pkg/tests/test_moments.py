import math

import numpy as np
import pytest

from conftest import expm_series, kit_for, make_model, model_a, model_b, model_c, model_d, random_critical_model
from dscbi.model import build_derived, derived_from
from dscbi.moments import (
    c_matrices,
    cond_var_M,
    flow_second_moment,
    mean_Xt,
    phi1,
    scalar_functionals,
    triangle_integral,
    v_matrices,
)

U = np.array([1.0, 1.0])
V = np.array([1.0, -1.0])


def _brute_v(params, derived, nodes=60):
    """Tensor Gauss rule with the series exponential, independent of the library."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    x, w = 0.5 * (x + 1), 0.5 * w
    y, wy = np.polynomial.legendre.leggauss(20)
    y, wy = 0.5 * (y + 1), 0.5 * wy
    tB = np.asarray(derived.tB)
    C1, C2, _ = c_matrices(params)
    N = params.nu.second_moment()
    tb = np.asarray(derived.tbeta)
    V1 = np.zeros((2, 2))
    V2 = np.zeros((2, 2))
    V0 = np.zeros((2, 2))
    for xi, wi in zip(x, w):
        E = expm_series(xi * tB)
        F = expm_series((1 - xi) * tB)
        inner = sum(wj * (1 - xi) * expm_series((1 - xi) * yj * tB) @ tb for yj, wj in zip(y, wy))
        for l, C in enumerate((C1, C2)):
            S = E @ C @ E.T
            V1 += wi * F[l, 0] * S
            V2 += wi * F[l, 1] * S
            V0 += wi * inner[l] * S
        V0 += wi * E @ N @ E.T
    return V1, V2, V0


def test_scalar_integrals():
    assert phi1(0.0) == 1.0
    assert phi1(-2.0) == pytest.approx((1 - math.exp(-2)) / 2, rel=1e-15)
    from scipy.integrate import dblquad

    for a, b in [(-2.0, 0.0), (-4.0, -2.0), (-1.0, -1.0), (-1.0, -1.0 + 1e-5), (0.0, 0.0), (3.0, -2.0)]:
        ref = dblquad(lambda v, u: math.exp(a * u + b * v), 0, 1, 0, lambda u: 1 - u, epsabs=1e-14, epsrel=1e-13)[0]
        assert triangle_integral(a, b) == pytest.approx(ref, rel=1e-11)
        assert triangle_integral(a, b) == pytest.approx(triangle_integral(b, a), rel=1e-12)


def test_triangle_integral_continuous_across_branch():
    for m in (-3.0, -0.5, 0.0, 1.5):
        lo = triangle_integral(m + 1.0001e-4, m - 1.0001e-4)
        hi = triangle_integral(m + 0.9999e-4, m - 0.9999e-4)
        assert lo == pytest.approx(hi, rel=1e-10)


def test_c_matrices_examples():
    for C in c_matrices(make_model(nu=[(1, 1, 1)])):
        np.testing.assert_array_equal(C, 0)
    C1, C2, Cb = c_matrices(model_c())
    np.testing.assert_array_equal(C1, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(C2, [[0, 0], [0, 1]])
    np.testing.assert_array_equal(Cb, 0.5 * np.eye(2))
    C1, _, _ = c_matrices(make_model(B=[[-3, 1], [1, -1]], mu1=[(1, 1, 2)]))
    np.testing.assert_array_equal(C1, [[2, 2], [2, 2]])


def test_v_matrices_perron_model():
    d, k = kit_for(model_a())
    np.testing.assert_allclose(k.V1, 0, atol=1e-15)
    np.testing.assert_allclose(k.V2, 0, atol=1e-15)
    np.testing.assert_allclose(k.V0, [[1, 1], [1, 1]], atol=1e-14)
    assert k.V0_uu == pytest.approx(4.0, abs=1e-13)


def test_v0_vv_offdiagonal_jumps():
    d, k = kit_for(model_b())
    assert k.V0_vv == pytest.approx((1 - math.exp(-4)) / 4 * 4, abs=1e-12)
    assert k.V0_vv == pytest.approx(0.9816844, abs=1e-7)


def test_v_matrices_against_brute_force_oracle():
    for p in (model_c(), model_d()):
        d, k = kit_for(p)
        for ours, ref in zip((k.V1, k.V2, k.V0), _brute_v(p, d)):
            np.testing.assert_allclose(ours, ref, atol=1e-9)


def test_moment_identities_on_random_models(rng):
    for i in range(20):
        p = random_critical_model(rng, pure=(i % 4 == 0))
        d, k = kit_for(p)
        assert k.quadrature_error < 1e-10
        fac = (1 - d.delta**2) / (2 * math.log(1 / d.delta))
        assert k.Ctilde_uu == pytest.approx(U @ k.Cbar @ U, abs=1e-10)
        assert k.Ctilde_vv == pytest.approx(fac * (V @ k.Cbar @ V), abs=1e-10)
        np.testing.assert_allclose(k.Ctilde, 0.5 * (k.V1 + k.V2), atol=1e-15)
        for M in (k.C1, k.C2, k.V1, k.V2, k.V0):
            np.testing.assert_array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() >= -1e-12
        if p.is_pure_immigration():
            sf = scalar_functionals(p.nu)
            assert k.V0_uu == pytest.approx(sf.s_plus, abs=1e-10)
            assert k.V0_vv == pytest.approx(fac * sf.s_minus, abs=1e-10)


def test_cond_var_examples():
    d, k = kit_for(model_c())
    np.testing.assert_array_equal(cond_var_M(k, (0, 0)), k.V0)
    np.testing.assert_allclose(cond_var_M(k, (2.5, 2.5)), 5.0 * k.Ctilde + k.V0, atol=1e-14)
    np.testing.assert_allclose(cond_var_M(k, (1, 0)), k.V1 + k.V0, atol=1e-15)
    with pytest.raises(ValueError):
        cond_var_M(k, (-1, 0))


def test_mean_xt_examples():
    d = build_derived(model_a())
    np.testing.assert_array_equal(mean_Xt(d, (0.3, 0.2), 0.0), [0.3, 0.2])
    np.testing.assert_allclose(mean_Xt(d, (0, 0), 1.0), [1.5, 1.5], atol=1e-15)
    np.testing.assert_allclose(mean_Xt(d, (1, 0), 1.0), [2.0676676, 1.9323324], atol=1e-7)


def test_scalar_functionals_examples():
    e = scalar_functionals(make_model().nu)
    assert e[:3] == (0.0, 0.0, 0.0) and np.all(e.first_moment == 0)
    f = scalar_functionals(model_a().nu)
    assert f[:3] == (4.0, 0.0, 0.0)
    np.testing.assert_array_equal(f.first_moment, [1, 1])
    g = scalar_functionals(model_b().nu)
    assert g[:3] == (4.0, 4.0, 0.0)


def test_flow_second_moment_matches_n_for_zero_matrix():
    d = derived_from(0.0, 0.0 + 1e-300, [0, 0])
    N = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(flow_second_moment(d, N), N, atol=1e-14)
