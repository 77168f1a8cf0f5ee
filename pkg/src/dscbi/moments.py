"""Second-order moment machinery.

The conditional variance of the martingale difference
``M_k = X_k - E(X_k | X_{k-1})`` is affine in the previous state,

    Var(M_k | X_{k-1} = x) = x_1 V_1 + x_2 V_2 + V_0,

with

    V_i = sum_l int_0^1 <exp((1-u) B~) e_i, e_l> exp(u B~) C_l exp(u B~)^T du,
    V_0 = int_0^1 exp(u B~) N exp(u B~)^T du
          + sum_l int_0^1 (int_0^{1-u} <exp(v B~) beta~, e_l> dv)
                          exp(u B~) C_l exp(u B~)^T du,

where ``C_l = 2 c_l e_l e_l^T + int z z^T mu_l(dz)`` and
``N = int z z^T nu(dz)``.

Writing ``exp(u B~) = exp(u a_1) P_1 + exp(u a_2) P_2`` with the spectral
projections ``P_1 = u u^T / 2``, ``P_2 = v v^T / 2`` and
``(a_1, a_2) = (log rho, log delta)`` turns every integral into a finite sum
of one-dimensional integrals ``int_0^1 exp(a s) ds`` and triangle integrals
``int int_{u + v <= 1} exp(a u + b v)``.  Those scalar integrals have closed
forms, evaluated below with care near coincident exponents.  An
independent Gauss-Legendre evaluation of the same matrices is always run
alongside and any disagreement above 1e-9 raises
:class:`~dscbi.errors.QuadratureMismatch`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import QuadratureMismatch
from .model import expm_tB, integral_of_power

QUADRATURE_NODES = 32
MISMATCH_TOL = 1e-9

_P = (np.full((2, 2), 0.5), np.array([[0.5, -0.5], [-0.5, 0.5]]))
_U = np.array([1.0, 1.0])
_V = np.array([1.0, -1.0])


# --------------------------------------------------------------------------
# scalar integrals
# --------------------------------------------------------------------------
def phi1(a):
    """``int_0^1 exp(a s) ds``."""
    return integral_of_power(a)


def _series(m, k, terms=40):
    # int_0^1 s^k exp(m s) ds = sum_i m^i / (i! (i + k + 1))
    total = 0.0
    term = 1.0
    for i in range(terms):
        total += term / (i + k + 1)
        term *= m / (i + 1)
    return total


def _moment1(m):
    if abs(m) < 1.0:
        return _series(m, 1)
    return (math.exp(m) * (m - 1.0) + 1.0) / (m * m)


def _moment3(m):
    if abs(m) < 2.0:
        return _series(m, 3)
    m2 = m * m
    return math.exp(m) * (1.0 / m - 3.0 / m2 + 6.0 / (m2 * m) - 6.0 / (m2 * m2)) + 6.0 / (m2 * m2)


def triangle_integral(a, b):
    """``int_0^1 int_0^{1-u} exp(a u + b v) dv du``.

    This is the second divided difference of ``exp`` at ``(0, a, b)``.  For
    well separated exponents the divided-difference formula is used; for
    ``|a - b| < 2e-4`` an expansion about the midpoint avoids cancellation.
    """
    if abs(a - b) >= 2e-4:
        return (phi1(a) - phi1(b)) / (a - b)
    m = 0.5 * (a + b)
    d = 0.5 * (a - b)
    return _moment1(m) + d * d / 6.0 * _moment3(m)


# --------------------------------------------------------------------------
# matrices
# --------------------------------------------------------------------------
class ScalarFunctionals(NamedTuple):
    s_plus: float
    s_minus: float
    s_diff: float
    first_moment: np.ndarray


def scalar_functionals(m):
    """Return ``int (z1+z2)^2``, ``int (z1-z2)^2``, ``int (z1^2-z2^2)`` and
    ``int z`` against the jump measure ``m``."""
    if len(m) == 0:
        return ScalarFunctionals(0.0, 0.0, 0.0, np.zeros(2))
    z1, z2 = m.z[:, 0], m.z[:, 1]
    return ScalarFunctionals(
        float(m.w @ (z1 + z2) ** 2),
        float(m.w @ (z1 - z2) ** 2),
        float(m.w @ (z1**2 - z2**2)),
        m.first_moment(),
    )


def c_matrices(params, derived=None):
    """Return ``(C1, C2, Cbar)`` with ``Cbar = (C1 + C2) / 2``."""
    Cs = []
    for k in range(2):
        C = params.mu[k].second_moment().copy()
        C[k, k] += 2.0 * params.c[k]
        Cs.append(C)
    return Cs[0], Cs[1], 0.5 * (Cs[0] + Cs[1])


def _flow_closed(derived, N):
    a = derived.eigen_logs
    out = np.zeros((2, 2))
    for p in range(2):
        for q in range(2):
            out += phi1(a[p] + a[q]) * (_P[p] @ N @ _P[q])
    return out


def _v_closed(derived, Cs, N):
    a = derived.eigen_logs
    tbeta = np.asarray(derived.tbeta)
    Vi = [np.zeros((2, 2)), np.zeros((2, 2))]
    V0 = _flow_closed(derived, N)
    for l in range(2):
        blocks = {(p, q): _P[p] @ Cs[l] @ _P[q] for p in range(2) for q in range(2)}
        for r in range(2):
            Pb = _P[r] @ tbeta
            for (p, q), blk in blocks.items():
                e = a[p] + a[q]
                w = math.exp(a[r]) * phi1(e - a[r])
                for i in range(2):
                    Vi[i] += _P[r][l, i] * w * blk
                V0 += Pb[l] * triangle_integral(e, a[r]) * blk
    return Vi[0], Vi[1], V0


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _flow_quadrature(derived, N, nodes=QUADRATURE_NODES):
    x, w = _gauss01(nodes)
    out = np.zeros((2, 2))
    for xi, wi in zip(x, w):
        E = expm_tB(derived, xi)
        out += wi * (E @ N @ E.T)
    return out


def _v_quadrature(derived, Cs, N, nodes=QUADRATURE_NODES):
    x, w = _gauss01(nodes)
    tbeta = np.asarray(derived.tbeta)
    Vi = [np.zeros((2, 2)), np.zeros((2, 2))]
    V0 = _flow_quadrature(derived, N, nodes)
    for xi, wi in zip(x, w):
        E = expm_tB(derived, xi)
        Einv = expm_tB(derived, 1.0 - xi)
        # inner integral over [0, 1 - xi] by a rescaled rule
        inner = np.zeros(2)
        for yj, wj in zip(x, w):
            inner += wj * (1.0 - xi) * (expm_tB(derived, (1.0 - xi) * yj) @ tbeta)
        for l in range(2):
            S = E @ Cs[l] @ E.T
            for i in range(2):
                Vi[i] += wi * Einv[l, i] * S
            V0 += wi * inner[l] * S
    return Vi[0], Vi[1], V0


def flow_second_moment(derived, N, check=True):
    """``int_0^1 exp(t B~) N exp(t B~)^T dt`` in closed form.

    With ``N = int z z^T nu(dz)`` this is the integral
    ``int_0^1 int (exp(t B~) z)(exp(t B~) z)^T nu(dz) dt``.
    """
    closed = _flow_closed(derived, np.asarray(N, dtype=float))
    if check:
        quad = _flow_quadrature(derived, np.asarray(N, dtype=float))
        _compare("flow second moment", closed, quad)
    return closed


def _compare(name, closed, quad):
    diff = float(np.max(np.abs(np.asarray(closed) - np.asarray(quad))))
    if not diff <= MISMATCH_TOL:
        raise QuadratureMismatch(f"{name}: closed form and quadrature differ by {diff:.3e}")


@dataclass(frozen=True, eq=False)
class MomentKit:
    """Second-moment matrices of one observation step.

    Attributes
    ----------
    C1, C2, Cbar, Ctilde, V1, V2, V0 : ndarray (2, 2)
    Ctilde_uu, Ctilde_vv : float
        ``<Ctilde u, u>`` and ``<Ctilde v, v>``.
    V0_uu, V0_vv, V0_uv : float
        ``<V0 u, u>``, ``<V0 v, v>`` and ``<V0 u, v>``.
    quadrature_error : float
        Largest entrywise difference between the closed form and the
        Gauss-Legendre evaluation.
    """

    C1: np.ndarray
    C2: np.ndarray
    Cbar: np.ndarray
    Ctilde: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    V0: np.ndarray
    Ctilde_uu: float
    Ctilde_vv: float
    V0_uu: float
    V0_vv: float
    V0_uv: float
    quadrature_error: float


def v_matrices(params, derived, nodes=QUADRATURE_NODES):
    """Compute :class:`MomentKit` for a parameter set.

    The closed form is returned; a ``nodes``-point Gauss-Legendre rule is
    evaluated as a cross-check.

    Raises
    ------
    QuadratureMismatch
        If the two evaluations differ by more than 1e-9 in any entry.
    """
    C1, C2, Cbar = c_matrices(params, derived)
    N = params.nu.second_moment()
    V1, V2, V0 = _v_closed(derived, (C1, C2), N)
    Q1, Q2, Q0 = _v_quadrature(derived, (C1, C2), N, nodes)
    err = max(float(np.max(np.abs(a - b))) for a, b in ((V1, Q1), (V2, Q2), (V0, Q0)))
    if not err <= MISMATCH_TOL:
        raise QuadratureMismatch(f"V matrices: closed form and quadrature differ by {err:.3e}")
    V1, V2, V0 = (0.5 * (M + M.T) for M in (V1, V2, V0))
    Ct = 0.5 * (V1 + V2)
    return MomentKit(
        C1=C1,
        C2=C2,
        Cbar=Cbar,
        Ctilde=Ct,
        V1=V1,
        V2=V2,
        V0=V0,
        Ctilde_uu=float(_U @ Ct @ _U),
        Ctilde_vv=float(_V @ Ct @ _V),
        V0_uu=float(_U @ V0 @ _U),
        V0_vv=float(_V @ V0 @ _V),
        V0_uv=float(_U @ V0 @ _V),
        quadrature_error=err,
    )


def cond_var_M(kit, x):
    """``Var(M_k | X_{k-1} = x) = x_1 V_1 + x_2 V_2 + V_0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("state must be nonnegative")
    return x[0] * kit.V1 + x[1] * kit.V2 + kit.V0


def mean_Xt(derived, x, t):
    """``E(X_t | X_0 = x) = exp(t B~) x + (int_0^t exp(u B~) du) beta~``."""
    if not t >= 0:
        raise ValueError("t must be nonnegative")
    x = np.asarray(x, dtype=float)
    lr, ld = derived.eigen_logs
    tb = np.asarray(derived.tbeta)
    out = np.zeros(2)
    for P, a in zip(_P, (lr, ld)):
        out += math.exp(t * a) * (P @ x) + t * integral_of_power(t * a) * (P @ tb)
    return out
