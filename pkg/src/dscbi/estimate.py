"""Conditional least squares (CLS) estimation from a unit-time skeleton.

With ``U_k = X_{k,1} + X_{k,2}`` and ``V_k = X_{k,1} - X_{k,2}`` the
conditional mean ``E(X_k | X_{k-1}) = exp(B~) X_{k-1} + beta-bar`` splits
into two scalar autoregressions,

    U_k = rho U_{k-1} + <u, beta-bar> + <u, M_k>,
    V_k = delta V_{k-1} + <v, beta-bar> + <v, M_k>,

so the CLS estimators of ``rho`` and ``delta`` are ordinary least-squares
slopes and ``beta-bar`` is recovered from the two intercepts.  All sums are
accumulated with :func:`math.fsum` and the slope formulas are evaluated in
centred form, which is algebraically identical to the raw-moment form but
does not cancel catastrophically when ``U`` grows linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimatorUndefined, NonPositiveEstimate
from .model import expm_tB, h_inverse

DEGENERACY_EPS = 1e-12


def _fsum(x):
    return math.fsum(np.asarray(x, dtype=float).ravel().tolist())


def decompose_uv(path):
    """Return ``(U, V)`` with ``U_k = X_{k,1} + X_{k,2}``, ``V_k = X_{k,1} - X_{k,2}``."""
    X = np.asarray(getattr(path, "states", path), dtype=float)
    return X[:, 0] + X[:, 1], X[:, 0] - X[:, 1]


def reconstruct(U, V):
    """Inverse of :func:`decompose_uv`."""
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    return np.column_stack(((U + V) / 2.0, (U - V) / 2.0))


def _centred(x):
    x = np.asarray(x, dtype=float)
    return x - _fsum(x) / x.size


def _spread(lagged):
    """``n sum (x - mean)^2`` and the guard ``eps n sum x^2``."""
    n = lagged.size
    c = _centred(lagged)
    return n * _fsum(c * c), DEGENERACY_EPS * n * _fsum(lagged * lagged)


def existence_flags(U, V):
    """Existence of the CLS slopes for ``U`` and ``V``.

    ``H`` holds when ``n sum U_{k-1}^2 - (sum U_{k-1})^2`` exceeds
    ``1e-12 n sum U_{k-1}^2``; ``Htilde`` is the same condition for ``V``.

    Parameters
    ----------
    U, V : array_like, length n + 1
        Sequences indexed ``0, ..., n``; only ``k - 1 = 0, ..., n - 1`` enter.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if U.size < 3:
        raise ValueError("existence flags need n >= 2 observations after X_0")
    du, gu = _spread(U[:-1])
    dv, gv = _spread(V[:-1])
    return bool(du > gu), bool(dv > gv)


def _slope(y, x):
    cx = _centred(x)
    return _fsum(_centred(y) * cx) / _fsum(cx * cx)


@dataclass(frozen=True, eq=False)
class CLSResult:
    """CLS estimates; undefined entries are NaN.

    Attributes
    ----------
    rho_hat, delta_hat : float
    obeta_hat : ndarray (2,)
    H, Htilde : bool
    n : int
    """

    rho_hat: float
    delta_hat: float
    obeta_hat: np.ndarray
    H: bool
    Htilde: bool
    n: int

    @property
    def failed(self):
        return tuple(name for name, ok in (("H", self.H), ("Htilde", self.Htilde)) if not ok)


def cls_estimate(path, strict=True):
    """CLS estimators of ``(rho, delta, beta-bar)``.

    Parameters
    ----------
    path : SkeletonPath or array_like (n + 1, 2)
    strict : bool
        When true, raise unless both existence flags hold.  When false,
        return whatever is defined and leave the rest as NaN.

    Raises
    ------
    EstimatorUndefined
        In strict mode, when ``H`` or ``Htilde`` fails.
    """
    X = np.asarray(getattr(path, "states", path), dtype=float)
    U, V = decompose_uv(X)
    n = X.shape[0] - 1
    H, Ht = existence_flags(U, V)
    rho = _slope(U[1:], U[:-1]) if H else math.nan
    delta = _slope(V[1:], V[:-1]) if Ht else math.nan
    if H and Ht:
        mx = np.array([_fsum(X[1:, 0]), _fsum(X[1:, 1])]) / n
        mu_ = _fsum(U[:-1]) / n
        mv = _fsum(V[:-1]) / n
        obeta = mx - 0.5 * np.array([rho * mu_ + delta * mv, rho * mu_ - delta * mv])
    else:
        obeta = np.full(2, math.nan)
    res = CLSResult(rho, delta, obeta, H, Ht, n)
    if strict and res.failed:
        raise EstimatorUndefined(res.failed)
    return res


def s_hat(r):
    """Criticality estimate ``log rho_hat``; needs only ``H``."""
    if not r.H:
        raise EstimatorUndefined(("H",))
    if not r.rho_hat > 0:
        raise NonPositiveEstimate(f"rho_hat = {r.rho_hat!r} is not positive")
    return math.log(r.rho_hat)


def transform_estimates(r):
    """Return ``(s_hat, gamma_hat, kappa_hat, tbeta_hat)``.

    Raises
    ------
    EstimatorUndefined
        If either existence flag fails.
    NonPositiveEstimate
        If ``rho_hat <= 0`` or ``delta_hat <= 0``.
    """
    if r.failed:
        raise EstimatorUndefined(r.failed)
    if not (r.rho_hat > 0 and r.delta_hat > 0):
        raise NonPositiveEstimate(f"rho_hat = {r.rho_hat!r}, delta_hat = {r.delta_hat!r} must be positive")
    g, k, tb = h_inverse(r.rho_hat, r.delta_hat, r.obeta_hat)
    return math.log(r.rho_hat), g, k, tb


def residuals_M(path, derived):
    """Martingale differences ``M_k = X_k - exp(B~) X_{k-1} - beta-bar``.

    ``derived`` must hold the true parameters; this is a diagnostic.

    Returns
    -------
    ndarray (n, 2)
    """
    X = np.asarray(getattr(path, "states", path), dtype=float)
    A = expm_tB(derived, 1.0)
    return X[1:] - X[:-1] @ A.T - np.asarray(derived.obeta)


def normal_equations(path):
    """Normal equations ``G alpha = h`` of the CLS objective.

    The objective is ``sum_k ||X_k - F_{k-1}^T alpha||^2`` with
    ``alpha = (rho, delta, beta-bar_1, beta-bar_2)`` and
    ``F_{k-1}^T = [[U/2, V/2, 1, 0], [U/2, -V/2, 0, 1]]`` evaluated at
    ``k - 1``.  Returns ``(G, h)`` with ``G = sum F F^T`` and
    ``h = sum F X_k``.
    """
    X = np.asarray(getattr(path, "states", path), dtype=float)
    U, V = decompose_uv(X)
    G = np.zeros((4, 4))
    h = np.zeros(4)
    for k in range(1, X.shape[0]):
        u, v = U[k - 1], V[k - 1]
        Ft = np.array([[u / 2, v / 2, 1.0, 0.0], [u / 2, -v / 2, 0.0, 1.0]])
        G += Ft.T @ Ft
        h += Ft.T @ X[k]
    return G, h


def decomposed_errors(path, derived):
    """Estimation errors written through the true martingale differences.

    Returns ``(rho_hat - rho, delta_hat - delta, beta-bar_hat - beta-bar)``
    computed only from ``M_k``, ``U_{k-1}`` and ``V_{k-1}``; it must agree with
    the direct estimator minus the true values.
    """
    X = np.asarray(getattr(path, "states", path), dtype=float)
    U, V = decompose_uv(X)
    M = residuals_M(X, derived)
    n = X.shape[0] - 1
    Mu = M[:, 0] + M[:, 1]
    Mv = M[:, 0] - M[:, 1]
    er = _slope(Mu, U[:-1])
    ed = _slope(Mv, V[:-1])
    mu_ = _fsum(U[:-1]) / n
    mv = _fsum(V[:-1]) / n
    mM = np.array([_fsum(M[:, 0]), _fsum(M[:, 1])]) / n
    eb = mM - 0.5 * np.array([er * mu_ + ed * mv, er * mu_ - ed * mv])
    return er, ed, eb
