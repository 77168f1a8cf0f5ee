"""Explicit limit laws of the CLS estimators and a Monte-Carlo harness.

In the critical case the estimation errors have one of three kinds of limit.

* When ``<Ctilde v, v> > 0`` the limit of ``n (rho_hat - 1)`` is the
  non-normal functional ``I`` of the squared-Bessel-type process ``Y``;
  the ``delta`` estimator is asymptotically a normal variance mixture.
* When ``c = 0`` and there are no branching jumps, ``U`` grows like a
  deterministic line and every estimator is asymptotically normal:
  ``n^{3/2} s_hat -> N(0, sigma^2)``, the vector
  ``(n^{3/2}(rho_hat - 1), n^{1/2}(delta_hat - delta), n^{1/2}(beta-bar_hat - beta-bar))``
  has covariance ``S`` and ``n^{1/2}(gamma_hat, kappa_hat, beta~_hat)`` has
  covariance ``R``.
* The martingale sums behind both of these have the joint normal limit with
  covariance ``Sigma`` when ``<Ctilde u, u> = 0``.

:func:`theoretical_law` evaluates the closed-form matrices and, where a
second independent route exists, evaluates that as well so the two can be
compared.  :func:`run_monte_carlo` measures the finite-``n`` distribution of
the scaled errors and sets it against those laws.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import stats

from .errors import CBIError, NotCritical
from .estimate import _fsum, cls_estimate, decompose_uv, s_hat, transform_estimates
from .model import CRITICAL_TOL, integral_expm
from .moments import flow_second_moment, scalar_functionals
from .simulate import limit_joint_batch, psd_sqrt, skeleton_batch

ZERO_TOL = 1e-10
_SILENT_ZERO = 1e-14
MC_BLOCK = 500
DEFAULT_EULER_H = 1.0 / 256

_U = np.array([1.0, 1.0])
_V = np.array([1.0, -1.0])
_J = np.array([[1.0, -1.0], [-1.0, 1.0]])

#: scaled-error columns recorded by :func:`run_monte_carlo`
SCALED_COLUMNS = ("s", "rho", "delta", "obeta1", "obeta2", "gamma", "kappa", "tbeta1", "tbeta2")
#: raw estimate columns recorded by :func:`run_monte_carlo`
RAW_COLUMNS = (
    "H",
    "Htilde",
    "rho_hat",
    "delta_hat",
    "obeta1",
    "obeta2",
    "s_hat",
    "gamma_hat",
    "kappa_hat",
    "tbeta1",
    "tbeta2",
)
DECILES = tuple(range(10, 100, 10))


class Regime(Enum):
    GENERAL_NON_NORMAL = "GeneralNonNormal"
    DEGENERATE_V_VANISHES = "DegenerateVvanishes"
    PURE_IMMIGRATION_NORMAL = "PureImmigrationNormal"
    FULLY_DEGENERATE = "FullyDegenerate"


def _is_zero(x, name):
    if abs(x) < ZERO_TOL:
        if abs(x) > _SILENT_ZERO:
            warnings.warn(f"{name} = {x:.3e} is treated as zero", RuntimeWarning, stacklevel=3)
        return True
    return False


@dataclass(frozen=True, eq=False)
class LimitLaw:
    """Limit laws applicable to one critical parameter set.

    Attributes
    ----------
    regime : Regime
    v_degenerate : bool
        ``||c||^2 + sum_i int (z1-z2)^2 mu_i + int (z1-z2)^2 nu + (beta~_1 - beta~_2)^2 = 0``,
        in which case ``X_{k,1} = X_{k,2}`` almost surely and neither
        ``delta_hat`` nor ``beta-bar_hat`` exists.
    sigma2_s : float or None
        Variance of the normal limit of ``n^{3/2} s_hat``.
    R : ndarray (4, 4) or None
        Covariance of the normal limit of
        ``n^{1/2}(gamma_hat - gamma, kappa_hat - kappa, beta~_hat - beta~)``.
    S : ndarray (4, 4) or None
        Covariance of the normal limit of
        ``(n^{3/2}(rho_hat - 1), n^{1/2}(delta_hat - delta), n^{1/2}(beta-bar_hat - beta-bar))``.
    Sigma : ndarray (4, 4) or None
        Covariance of the normal limit of
        ``(sum <u,M_k> / n^{1/2}, sum <u,M_k> U_{k-1} / n^{3/2},
        sum <v,M_k> / n^{1/2}, sum <v,M_k> V_{k-1} / n^{1/2})``.
    Mconst : float or None
        Limit of ``n^{-1} sum V_k^2`` when ``<Ctilde v, v> = 0``.
    lln_limits : dict
        ``V_mean``, ``U_sum``, ``U2_sum`` and ``UV_sum``: the limits of
        ``n^{-1} sum V_k``, ``n^{-2} sum U_{k-1}``, ``n^{-3} sum U_{k-1}^2`` and
        ``n^{-2} sum U_{k-1} V_{k-1}``.
    R_dual, S_dual : ndarray (4, 4) or None
        ``R`` obtained from ``S`` by the delta method and ``S`` obtained
        from ``Sigma`` by the linearisation of the estimators.
    joint_cov : ndarray (9, 9) or None
        Covariance of the normal limit of the columns :data:`SCALED_COLUMNS`.
    """

    regime: Regime
    v_degenerate: bool
    sigma2_s: float | None
    R: np.ndarray | None
    S: np.ndarray | None
    Sigma: np.ndarray | None
    Mconst: float | None
    lln_limits: dict = field(default_factory=dict)
    R_dual: np.ndarray | None = None
    S_dual: np.ndarray | None = None
    joint_cov: np.ndarray | None = None


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------
def _R_direct(derived, sf):
    g, k = derived.gamma, derived.kappa
    bd = float(derived.tbeta[0] - derived.tbeta[1])
    e = math.expm1(2.0 * (k - g))
    R11 = e / 4.0 * _J
    R21 = -bd * e / (4.0 * (k - g)) * _J
    brace = (k - g) / (2.0 * (-math.expm1(g - k)) ** 2) * sf.s_minus + bd**2 / ((k - g) ** 2 * math.exp(2.0 * (g - k)))
    R22 = (
        sf.s_plus * np.ones((2, 2))
        + 0.5 * sf.s_diff * np.diag([1.0, -1.0])
        + (-math.expm1(2.0 * (g - k))) / 4.0 * brace * _J
    )
    return np.block([[R11, R21.T], [R21, R22]])


def _S_direct(derived, sf, V0int):
    a = float(_U @ derived.tbeta)
    bd = float(derived.tbeta[0] - derived.tbeta[1])
    delta = derived.delta
    w = np.array([4.0 / a, 0.0, -1.0, -1.0])
    q = np.array([0.0, 1.0, -bd / (2.0 * math.log(1.0 / delta)), bd / (2.0 * math.log(1.0 / delta))])
    S = 0.75 * sf.s_plus * np.outer(w, w) + (1.0 - delta**2) * np.outer(q, q)
    S[2:, 2:] += V0int
    return S


def _Sigma_direct(derived, kit, Mconst):
    a = float(_U @ derived.tbeta)
    c_v = derived.tdelta * float(_V @ derived.tbeta) / (1.0 - derived.delta)
    uu, uv, vv = kit.V0_uu, kit.V0_uv, kit.V0_vv
    rows = [
        [uu, a / 2 * uu, uv, c_v * uv],
        [a / 2 * uu, a * a / 3 * uu, a / 2 * uv, a / 2 * c_v * uv],
        [uv, a / 2 * uv, vv, c_v * vv],
        [c_v * uv, a / 2 * c_v * uv, c_v * vv, Mconst * vv],
    ]
    return np.array(rows)


def sigma_factored(derived, kit):
    """``Sigma`` assembled as a sum of explicit outer products.

    The martingale sums are driven by ``V0^{1/2}`` times a Brownian motion;
    this representation is PSD by construction and is independent of the
    entrywise formula used in :func:`theoretical_law`.
    """
    a = float(_U @ derived.tbeta)
    delta = derived.delta
    c_v = derived.tdelta * float(_V @ derived.tbeta) / (1.0 - delta)
    root = psd_sqrt(kit.V0)
    r = np.vstack([_U @ root, a / 2 * (_U @ root), _V @ root, c_v * (_V @ root)])
    out = r @ r.T
    out[1, 1] += a * a * kit.V0_uu / 12.0
    out[3, 3] += kit.V0_vv**2 / (1.0 - delta**2)
    return out


def _S_from_Sigma(derived, kit, Sigma, Mconst):
    a = float(_U @ derived.tbeta)
    delta = derived.delta
    vv = kit.V0_vv
    c_v = derived.tdelta * float(_V @ derived.tbeta) / (1.0 - delta)
    A = np.zeros((4, 4))
    A[0:2, 0:2] = 6.0 / a**2 * np.array([[-a, 2.0], [0.0, 0.0]])
    A[0:2, 2:4] = (1.0 - delta**2) / vv * np.array([[0.0, 0.0], [-c_v, 1.0]])
    A[2:4, 0:2] = 1.0 / a * np.array([[2.0 * a, -3.0], [2.0 * a, -3.0]])
    A[2:4, 2:4] = (1.0 - delta**2) / (2.0 * vv) * np.array([[Mconst, -c_v], [-Mconst, c_v]])
    return A @ Sigma @ A.T


def delta_method_matrix(derived):
    """Jacobian ``K L`` of ``(delta, beta-bar) -> (gamma, kappa, beta~)``.

    At a critical point ``log rho_hat`` is of smaller order, so only
    ``delta`` and ``beta-bar`` enter the ``n^{1/2}``-scale limit.

    Returns
    -------
    ndarray (4, 3)
    """
    delta = derived.delta
    obeta = np.asarray(derived.obeta)
    L = np.zeros((4, 3))
    L[0, 0] = 1.0 / delta
    L[1, 0] = (delta - 1.0 - delta * math.log(delta)) / ((delta - 1.0) ** 2 * delta)
    L[2, 1] = 1.0
    L[3, 2] = 1.0
    K = np.zeros((4, 4))
    K[0, 0], K[1, 0] = 0.5, -0.5
    hb = 0.5 * float(obeta[0] - obeta[1])
    K[2, 1], K[3, 1] = hb, -hb
    K[2:, 2:] = np.linalg.inv(integral_expm(derived))
    return K @ L


def joint_transform(derived):
    """Map from the ``S`` coordinates to :data:`SCALED_COLUMNS` (9 x 4)."""
    Jm = np.zeros((9, 4))
    Jm[0, 0] = 1.0
    Jm[1, 0] = 1.0
    Jm[2, 1] = 1.0
    Jm[3, 2] = 1.0
    Jm[4, 3] = 1.0
    Jm[5:, 1:] = delta_method_matrix(derived)
    return Jm


def _symmetrise(A):
    return None if A is None else 0.5 * (A + A.T)


def theoretical_law(params, derived, kit):
    """Classify the critical model and evaluate its limit laws.

    Parameters
    ----------
    params : ModelParams
    derived : DerivedParams
    kit : MomentKit

    Raises
    ------
    NotCritical
        If ``|s| > 1e-12``.
    """
    if abs(derived.s) > CRITICAL_TOL:
        raise NotCritical(f"criticality parameter s = {derived.s!r} is not zero")
    sf = scalar_functionals(params.nu)
    delta = derived.delta
    a = float(_U @ derived.tbeta)
    bd = float(derived.tbeta[0] - derived.tbeta[1])
    c_v = derived.tdelta * float(_V @ derived.tbeta) / (1.0 - delta)
    pure = params.is_pure_immigration()

    four = (
        float(params.c @ params.c)
        + sum(scalar_functionals(m).s_minus for m in params.mu)
        + sf.s_minus
        + bd * bd
    )
    v_deg = _is_zero(four, "degeneracy sum")
    vv_zero = _is_zero(kit.Ctilde_vv, "<Ctilde v, v>")
    if not vv_zero:
        regime = Regime.GENERAL_NON_NORMAL
    elif pure:
        regime = Regime.PURE_IMMIGRATION_NORMAL
    elif v_deg:
        regime = Regime.FULLY_DEGENERATE
    else:
        regime = Regime.DEGENERATE_V_VANISHES

    Mconst = kit.V0_vv / (1.0 - delta**2) + c_v**2 if vv_zero else None
    lln = dict(
        V_mean=c_v,
        U_sum=a / 2.0,
        U2_sum=a * a / 3.0,
        UV_sum=derived.tdelta * a * float(_V @ derived.tbeta) / (2.0 * (1.0 - delta)),
        VV_coef=kit.Ctilde_vv / (1.0 - delta**2),
        VV_mean=Mconst,
    )

    sigma2 = R = S = Sigma = R_dual = S_dual = joint = None
    if regime is Regime.PURE_IMMIGRATION_NORMAL:
        Sigma = _Sigma_direct(derived, kit, Mconst)
        if a > 0:
            sigma2 = 12.0 * sf.s_plus / a**2
            if not _is_zero(sf.s_minus, "int (z1 - z2)^2 nu"):
                V0int = flow_second_moment(derived, params.nu.second_moment())
                S = _S_direct(derived, sf, V0int)
                R = _R_direct(derived, sf)
                S_dual = _S_from_Sigma(derived, kit, Sigma, Mconst)
                KL = delta_method_matrix(derived)
                R_dual = KL @ S[1:, 1:] @ KL.T
                Jm = joint_transform(derived)
                joint = Jm @ S @ Jm.T
    return LimitLaw(
        regime=regime,
        v_degenerate=v_deg,
        sigma2_s=sigma2,
        R=_symmetrise(R),
        S=_symmetrise(S),
        Sigma=_symmetrise(Sigma),
        Mconst=Mconst,
        lln_limits=lln,
        R_dual=_symmetrise(R_dual),
        S_dual=_symmetrise(S_dual),
        joint_cov=_symmetrise(joint),
    )


# --------------------------------------------------------------------------
# laws of large numbers
# --------------------------------------------------------------------------
class LLNCheck(NamedTuple):
    statistic: float
    limit: float
    deviation: float


def _check(stat, limit):
    return LLNCheck(float(stat), float(limit), abs(float(stat) - float(limit)))


def lln_checks(path, derived, kit):
    """Compare normalised path sums with their almost-sure limits.

    ``VV_main`` compares ``n^{-2} sum V_k^2`` with
    ``<Ctilde v, v> / (1 - delta^2) n^{-2} sum U_{k-1}`` and is always
    evaluated.  ``V_mean`` and ``VV_mean`` are evaluated when
    ``<Ctilde v, v> = 0``; ``U_sum``, ``U2_sum`` and ``UV_sum`` when
    ``<Ctilde u, u> = 0``.

    Returns
    -------
    dict of LLNCheck
    """
    U, V = decompose_uv(path)
    n = U.size - 1
    delta = derived.delta
    a = float(_U @ derived.tbeta)
    vb = float(_V @ derived.tbeta)
    c_v = derived.tdelta * vb / (1.0 - delta)
    sumU = _fsum(U[:-1])
    out = {}
    coef = kit.Ctilde_vv / (1.0 - delta**2)
    out["VV_main"] = _check(_fsum(V[1:] ** 2) / n**2, coef * sumU / n**2)
    if _is_zero(kit.Ctilde_vv, "<Ctilde v, v>"):
        M = kit.V0_vv / (1.0 - delta**2) + c_v**2
        out["V_mean"] = _check(_fsum(V[1:]) / n, c_v)
        out["VV_mean"] = _check(_fsum(V[1:] ** 2) / n, M)
    if _is_zero(kit.Ctilde_uu, "<Ctilde u, u>"):
        out["U_sum"] = _check(sumU / n**2, a / 2.0)
        out["U2_sum"] = _check(_fsum(U[:-1] ** 2) / n**3, a * a / 3.0)
        out["UV_sum"] = _check(_fsum(U[:-1] * V[:-1]) / n**2, derived.tdelta * a * vb / (2.0 * (1.0 - delta)))
    return out


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class MCSummary:
    """Aggregated Monte-Carlo comparison.

    Attributes
    ----------
    reps, n, seed : int
    regime : Regime
    columns : tuple of str
        Names of the scaled-error columns, :data:`SCALED_COLUMNS`.
    scalings : dict
        Normalising power of ``n`` applied to each column (0 means unscaled).
    raw : ndarray (reps, 11)
        Raw estimates in the order :data:`RAW_COLUMNS`; NaN where undefined.
    scaled : ndarray (reps, 9)
        Scaled errors; NaN where undefined.
    valid : ndarray of bool (reps,)
    empirical_cov, theoretical_cov, cov_ratio : ndarray (9, 9)
        Pairwise-complete empirical covariance, the limit covariance (NaN
        where no closed form exists) and their ratio on entries where the
        limit is nonzero.
    ks_stats : dict
        One-sample Kolmogorov-Smirnov statistic against the limiting normal
        for each column with positive limiting variance (normal regime).
    quantile_table : list of dict
        Rows ``column, decile, empirical, limit, difference`` comparing
        empirical deciles with those of simulated limit draws
        (non-normal regimes).
    ks_two_sample : dict
        Two-sample KS statistic between each column and its limit draws.
    limit_iqr : dict
        Interquartile range of the limit draws of each column.
    h_fraction, htilde_fraction, invalid_fraction : float
    limit_invalid_fraction : float
        Fraction of limit draws lost to a degenerate denominator.
    """

    reps: int
    n: int
    seed: int
    regime: Regime
    columns: tuple
    scalings: dict
    raw: np.ndarray
    scaled: np.ndarray
    valid: np.ndarray
    empirical_cov: np.ndarray
    theoretical_cov: np.ndarray
    cov_ratio: np.ndarray
    ks_stats: dict
    quantile_table: list
    ks_two_sample: dict
    limit_iqr: dict
    h_fraction: float
    htilde_fraction: float
    invalid_fraction: float
    limit_invalid_fraction: float


def worker_count():
    """Number of Monte-Carlo worker processes from ``CBI_THREADS`` (default 1)."""
    raw = os.environ.get("CBI_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    try:
        k = int(raw)
    except ValueError:
        raise ValueError(f"CBI_THREADS must be a positive integer, got {raw!r}") from None
    if k < 1:
        raise ValueError(f"CBI_THREADS must be a positive integer, got {raw!r}")
    return k


def _raw_row(states):
    row = np.full(len(RAW_COLUMNS), math.nan)
    try:
        r = cls_estimate(states, strict=False)
    except (CBIError, ValueError, FloatingPointError):
        return row, False
    row[0], row[1] = float(r.H), float(r.Htilde)
    row[2], row[3] = r.rho_hat, r.delta_hat
    row[4:6] = r.obeta_hat
    if r.H:
        try:
            row[6] = s_hat(r)
        except CBIError:
            pass
    if r.H and r.Htilde:
        try:
            _, g, k, tb = transform_estimates(r)
            row[7], row[8] = g, k
            row[9:11] = tb
        except CBIError:
            pass
    return row, True


def _skeleton_task(args):
    params, derived, n, seed, start, reps, euler_h = args
    try:
        states = skeleton_batch(params, derived, n, seed, reps, start=start, h=euler_h)
    except CBIError:
        return np.full((reps, len(RAW_COLUMNS)), math.nan), np.zeros(reps, dtype=bool)
    rows = np.empty((reps, len(RAW_COLUMNS)))
    ok = np.empty(reps, dtype=bool)
    for i in range(reps):
        rows[i], ok[i] = _raw_row(states[i])
    return rows, ok


def _limit_task(args):
    derived, kit, h, seed, start, reps = args
    try:
        return limit_joint_batch(derived, kit, h, seed, reps, start=start)
    except CBIError:
        return None


def _blocks(reps):
    return [(b, min(MC_BLOCK, reps - b)) for b in range(0, reps, MC_BLOCK)]


def _run_tasks(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _scalings(regime):
    if regime is Regime.PURE_IMMIGRATION_NORMAL:
        return dict(s=1.5, rho=1.5, delta=0.5, obeta1=0.5, obeta2=0.5, gamma=0.5, kappa=0.5, tbeta1=0.5, tbeta2=0.5)
    return dict(s=1.0, rho=1.0, delta=0.5, obeta1=0.0, obeta2=0.0, gamma=0.5, kappa=0.5, tbeta1=0.0, tbeta2=0.0)


def _scale(raw, derived, n, scalings):
    truth = np.array(
        [
            0.0,
            derived.rho,
            derived.delta,
            derived.obeta[0],
            derived.obeta[1],
            derived.gamma,
            derived.kappa,
            derived.tbeta[0],
            derived.tbeta[1],
        ]
    )
    est = raw[:, [6, 2, 3, 4, 5, 7, 8, 9, 10]]
    factors = np.array([float(n) ** scalings[c] for c in SCALED_COLUMNS])
    return (est - truth) * factors


def _pairwise_cov(X):
    p = X.shape[1]
    out = np.full((p, p), math.nan)
    fin = np.isfinite(X)
    for i in range(p):
        for j in range(i, p):
            m = fin[:, i] & fin[:, j]
            if m.sum() < 2:
                continue
            xi, xj = X[m, i], X[m, j]
            ci = xi - _fsum(xi) / xi.size
            cj = xj - _fsum(xj) / xj.size
            out[i, j] = out[j, i] = _fsum(ci * cj) / (xi.size - 1)
    return out


def _limit_samples(derived, draws):
    """Limit draws of the scaled-error columns in the non-normal regime."""
    I = draws["I"]
    out = {"s": I, "rho": I}
    g, k = derived.gamma, derived.kappa
    delta = derived.delta
    ratio = draws["intY_dWtilde"] / draws["intY"]
    out["delta"] = math.sqrt(1.0 - delta**2) * ratio
    gam = 0.5 * math.sqrt(math.expm1(2.0 * (k - g))) * ratio
    out["gamma"] = gam
    out["kappa"] = -gam
    M1 = draws["M1"]
    shift = 0.5 * I * draws["intY"]
    out["obeta1"] = M1[:, 0] - shift
    out["obeta2"] = M1[:, 1] - shift
    A = 0.5 * (np.ones((2, 2)) + (k - g) / (-math.expm1(g - k)) * _J)
    tb = M1 @ A.T
    out["tbeta1"] = tb[:, 0] - shift
    out["tbeta2"] = tb[:, 1] - shift
    return out


def run_monte_carlo(params, n, reps, seed, h_limit=5e-4, euler_h=DEFAULT_EULER_H, derived=None, kit=None, workers=None):
    """Simulate, estimate and compare against the limit law.

    Replications are split into fixed blocks of :data:`MC_BLOCK` consecutive
    indices; replication ``r`` always uses the random stream ``(seed, r)``
    and limit draw ``r`` the stream ``(seed, 2**63 + r)``.  Blocks are
    collected in index order, so the result does not depend on ``workers``.

    Parameters
    ----------
    params : ModelParams
        A critical model.
    n : int
        Observations per replication.
    reps : int
        Number of replications, at least 100.
    seed : int
    h_limit : float
        Step of the limit sampler used in non-normal regimes.
    euler_h : float
        Euler step when no exact sampler applies.
    workers : int, optional
        Worker processes; defaults to :func:`worker_count`.
    """
    from .model import build_derived
    from .moments import v_matrices

    if reps < 100:
        raise ValueError("reps must be at least 100")
    if n < 2:
        raise ValueError("n must be at least 2")
    derived = build_derived(params) if derived is None else derived
    kit = v_matrices(params, derived) if kit is None else kit
    law = theoretical_law(params, derived, kit)
    workers = worker_count() if workers is None else int(workers)

    blocks = _blocks(reps)
    tasks = [(params, derived, n, seed, b, k, euler_h) for b, k in blocks]
    parts = _run_tasks(_skeleton_task, tasks, workers)
    raw = np.vstack([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])

    scalings = _scalings(law.regime)
    scaled = _scale(raw, derived, n, scalings)
    H = np.nan_to_num(raw[:, 0]) > 0
    Ht = np.nan_to_num(raw[:, 1]) > 0

    normal = law.regime is Regime.PURE_IMMIGRATION_NORMAL
    if normal and law.joint_cov is None:
        needed = [0]
    else:
        needed = list(range(len(SCALED_COLUMNS)))
    valid = ok & np.all(np.isfinite(scaled[:, needed]), axis=1)

    emp = _pairwise_cov(scaled)
    theo = np.full((9, 9), math.nan)
    if normal:
        if law.joint_cov is not None:
            theo = law.joint_cov.copy()
        elif law.sigma2_s is not None:
            theo[0:2, 0:2] = law.sigma2_s
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isfinite(theo) & (np.abs(theo) > 1e-12), emp / theo, math.nan)

    ks = {}
    qtable = []
    ks2 = {}
    iqr = {}
    limit_invalid = 0.0
    if normal:
        for j, col in enumerate(SCALED_COLUMNS):
            var = theo[j, j]
            x = scaled[:, j]
            x = x[np.isfinite(x)]
            if np.isfinite(var) and var > 1e-12 and x.size:
                ks[col] = float(stats.kstest(x, "norm", args=(0.0, math.sqrt(var))).statistic)
    else:
        ltasks = [(derived, kit, h_limit, seed, b, k) for b, k in blocks]
        lparts = _run_tasks(_limit_task, ltasks, workers)
        good = [p for p in lparts if p is not None]
        limit_invalid = 1.0 - sum(len(p["I"]) for p in good) / reps
        if good:
            draws = {key: np.concatenate([p[key] for p in good]) for key in good[0]}
            samples = _limit_samples(derived, draws)
            cols = ("s", "rho") if law.regime is not Regime.GENERAL_NON_NORMAL else SCALED_COLUMNS
            for col in cols:
                j = SCALED_COLUMNS.index(col)
                x = scaled[:, j]
                x = x[np.isfinite(x)]
                y = samples[col]
                y = y[np.isfinite(y)]
                if x.size == 0 or y.size == 0:
                    continue
                ex = np.percentile(x, DECILES)
                ly = np.percentile(y, DECILES)
                q1, q3 = np.percentile(y, [25, 75])
                iqr[col] = float(q3 - q1)
                ks2[col] = float(stats.ks_2samp(x, y).statistic)
                for d, e, l in zip(DECILES, ex, ly):
                    qtable.append(dict(column=col, decile=d, empirical=float(e), limit=float(l), difference=float(e - l)))

    return MCSummary(
        reps=reps,
        n=n,
        seed=seed,
        regime=law.regime,
        columns=SCALED_COLUMNS,
        scalings=scalings,
        raw=raw,
        scaled=scaled,
        valid=valid,
        empirical_cov=emp,
        theoretical_cov=theo,
        cov_ratio=ratio,
        ks_stats=ks,
        quantile_table=qtable,
        ks_two_sample=ks2,
        limit_iqr=iqr,
        h_fraction=float(H.mean()),
        htilde_fraction=float(Ht.mean()),
        invalid_fraction=float(1.0 - valid.mean()),
        limit_invalid_fraction=float(limit_invalid),
    )


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------
def _fmt(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    return "%.17g" % x


def mc_rows(summary):
    """Header and rows of the per-replication CSV."""
    header = ["rep"] + list(RAW_COLUMNS) + ["e_" + c for c in SCALED_COLUMNS] + ["valid"]
    rows = []
    for i in range(summary.reps):
        raw = summary.raw[i]
        r = [str(i)]
        r += ["nan" if math.isnan(raw[0]) else str(int(raw[0])), "nan" if math.isnan(raw[1]) else str(int(raw[1]))]
        r += [_fmt(x) for x in raw[2:]]
        r += [_fmt(x) for x in summary.scaled[i]]
        r.append(str(int(summary.valid[i])))
        rows.append(r)
    return header, rows


def _g(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else "%.6g" % x


def summary_text(summary):
    """Human-readable summary block with fixed formatting."""
    lines = [
        f"regime: {summary.regime.value}",
        f"n: {summary.n}",
        f"reps: {summary.reps}",
        f"seed: {summary.seed}",
        f"h_fraction: {_g(summary.h_fraction)}",
        f"htilde_fraction: {_g(summary.htilde_fraction)}",
        f"invalid_fraction: {_g(summary.invalid_fraction)}",
    ]
    cols = summary.columns
    lines.append("variances (column, scaling, empirical, theoretical, ratio):")
    for j, c in enumerate(cols):
        lines.append(
            f"  {c} {summary.scalings[c]:g} {_g(summary.empirical_cov[j, j])} "
            f"{_g(summary.theoretical_cov[j, j])} {_g(summary.cov_ratio[j, j])}"
        )
    if summary.ks_stats:
        lines.append("ks_vs_normal:")
        for c, v in summary.ks_stats.items():
            lines.append(f"  {c} {_g(v)}")
    if summary.ks_two_sample:
        lines.append(f"limit_invalid_fraction: {_g(summary.limit_invalid_fraction)}")
        lines.append("ks_two_sample (column, statistic, limit_iqr):")
        for c, v in summary.ks_two_sample.items():
            lines.append(f"  {c} {_g(v)} {_g(summary.limit_iqr[c])}")
        lines.append("deciles (column, decile, empirical, limit, difference):")
        for row in summary.quantile_table:
            lines.append(
                f"  {row['column']} {row['decile']} {_g(row['empirical'])} {_g(row['limit'])} {_g(row['difference'])}"
            )
    return "\n".join(lines) + "\n"


LAW_LABELS = {
    "R": ("gamma", "kappa", "tbeta1", "tbeta2"),
    "S": ("rho", "delta", "obeta1", "obeta2"),
    "Sigma": ("uM", "uMU", "vM", "vMV"),
    "R_dual": ("gamma", "kappa", "tbeta1", "tbeta2"),
    "S_dual": ("rho", "delta", "obeta1", "obeta2"),
    "joint_cov": SCALED_COLUMNS,
}


def law_rows(law):
    """Rows ``matrix, row, col, value`` dumping a :class:`LimitLaw`."""
    rows = [["regime", "", "", law.regime.value], ["v_degenerate", "", "", str(int(law.v_degenerate))]]
    for name in ("sigma2_s", "Mconst"):
        val = getattr(law, name)
        if val is not None:
            rows.append([name, "", "", _fmt(val)])
    for key, val in law.lln_limits.items():
        if val is not None:
            rows.append(["lln_" + key, "", "", _fmt(val)])
    for name, labels in LAW_LABELS.items():
        M = getattr(law, name)
        if M is None:
            continue
        for i, ri in enumerate(labels):
            for j, cj in enumerate(labels):
                rows.append([name, ri, cj, _fmt(M[i, j])])
    return rows
