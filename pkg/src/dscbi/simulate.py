"""Path samplers.

* :func:`simulate_exact_immigration` draws the unit-time skeleton exactly
  when ``c = 0`` and there is no branching jump measure.  Between
  observations the process then follows the linear flow
  ``dX = (beta + B~ X) dt`` plus compound-Poisson immigration jumps, each of
  which is transported by the flow until the next observation time.
* :func:`simulate_euler` is an Euler scheme for the general finite-activity
  jump-diffusion.  Branching jumps are simulated without compensation, so
  the drift uses ``D = B~ - [int z mu_1, int z mu_2]``; the intensity of
  branching jumps of type ``j`` is ``max(0, X_j) |mu_j|``, frozen at the start
  of each substep.  The state is clamped at zero after every substep.
* :func:`simulate_limit_Y`, :func:`sample_limit_joint` simulate the
  squared-Bessel-type scaling limit of ``U_k / n`` together with the
  martingale limit ``M`` and the functional ``I`` that governs the
  non-normal limit of ``n (rho_hat - 1)``.

Each replication uses its own counter-based stream keyed by
``(seed, replication index)``; the ``*_batch`` functions vectorise over a
block of replications without changing what any single replication sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDenominator, InvalidStep, NotPureImmigration
from .model import expm_tB, integral_expm
from .rng import LIMIT_STREAM_OFFSET, check_seed, stream

DENOMINATOR_TOL = 1e-14
_CHUNK_SUBSTEPS = 1024


@dataclass(frozen=True, eq=False)
class SkeletonPath:
    """Observed states ``X_0, ..., X_n`` at integer times.

    Attributes
    ----------
    states : ndarray (n + 1, 2)
    seed : int
    scheme : str
        ``"ExactImmigration"`` or ``"Euler(h)"``.
    clamp_count : int
        Number of Euler substeps in which the state was clamped at zero.
    """

    states: np.ndarray
    seed: int = 0
    scheme: str = "Data"
    clamp_count: int = 0

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        if s.ndim != 2 or s.shape[1] != 2 or s.shape[0] < 1:
            raise ValueError("states must have shape (n + 1, 2)")
        s.setflags(write=False)
        object.__setattr__(self, "states", s)

    @property
    def n(self):
        return self.states.shape[0] - 1

    @property
    def U(self):
        return self.states[:, 0] + self.states[:, 1]

    @property
    def V(self):
        return self.states[:, 0] - self.states[:, 1]


def steps_per_unit(h):
    """Return ``m = 1 / h`` after checking that it is a positive integer."""
    if not (isinstance(h, (int, float, np.floating)) and 0 < h <= 1):
        raise InvalidStep(f"step h = {h!r} must lie in (0, 1]")
    m = int(round(1.0 / h))
    if m < 1 or abs(m * h - 1.0) > 1e-9:
        raise InvalidStep(f"1/h must be an integer, got h = {h!r}")
    return m


def _start(x0):
    x0 = np.zeros(2) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (2,) or np.any(x0 < 0) or not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be a finite nonnegative 2-vector")
    return x0


# --------------------------------------------------------------------------
# exact sampler for the pure-immigration case
# --------------------------------------------------------------------------
def _exact_jumps(params, derived, n, gen):
    """Sum of transported immigration jumps over each unit interval, (n, 2)."""
    nu = params.nu
    out = np.zeros((n, 2))
    mass = nu.total_mass
    if mass == 0 or n == 0:
        return out
    counts = gen.poisson(mass, size=n)
    total = int(counts.sum())
    if total == 0:
        return out
    tau = gen.random(total)
    if len(nu) == 1:
        idx = np.zeros(total, dtype=np.intp)
    else:
        idx = gen.choice(len(nu), size=total, p=nu.w / mass)
    z = nu.z[idx]
    g = np.exp(derived.gamma * tau)
    ch = g * np.cosh(derived.kappa * tau)
    sh = g * np.sinh(derived.kappa * tau)
    step = np.repeat(np.arange(n), counts)
    out[:, 0] = np.bincount(step, weights=ch * z[:, 0] + sh * z[:, 1], minlength=n)
    out[:, 1] = np.bincount(step, weights=sh * z[:, 0] + ch * z[:, 1], minlength=n)
    return out


def exact_immigration_batch(params, derived, n, seed, reps, start=0, x0=None):
    """Exact skeletons for replications ``start, ..., start + reps - 1``.

    Returns
    -------
    ndarray (reps, n + 1, 2)
    """
    if not params.is_pure_immigration():
        raise NotPureImmigration("exact sampling needs c = 0 and empty branching measures")
    check_seed(seed)
    n = int(n)
    if n < 0:
        raise ValueError("n must be nonnegative")
    x0 = _start(x0)
    J = np.stack([_exact_jumps(params, derived, n, stream(seed, start + r)) for r in range(reps)], axis=-1)
    A = expm_tB(derived, 1.0)
    d0 = integral_expm(derived, 1.0) @ np.asarray(params.beta, dtype=float)
    out = np.empty((reps, n + 1, 2))
    x1 = np.full(reps, x0[0])
    x2 = np.full(reps, x0[1])
    out[:, 0, 0] = x1
    out[:, 0, 1] = x2
    a, b = A[0, 0], A[0, 1]
    for k in range(n):
        y1 = a * x1 + b * x2 + d0[0] + J[k, 0]
        x2 = b * x1 + a * x2 + d0[1] + J[k, 1]
        x1 = y1
        out[:, k + 1, 0] = x1
        out[:, k + 1, 1] = x2
    return out


def simulate_exact_immigration(params, derived, n, seed, x0=None, index=0):
    """Exact skeleton ``X_0, ..., X_n`` in the pure-immigration case.

    Per unit interval the number of immigration arrivals is Poisson with
    mean ``|nu|``, arrival times are uniform and sizes are drawn by weight;
    each jump ``z`` arriving a time ``tau`` before the next observation
    contributes ``exp(tau B~) z``.  The deterministic part is the flow of
    the drift ``beta``, ``exp(B~) X_{k-1} + (int_0^1 exp(s B~) ds) beta``.

    Raises
    ------
    NotPureImmigration
        If ``c != 0`` or a branching measure is nonempty.
    """
    states = exact_immigration_batch(params, derived, n, seed, 1, start=index, x0=x0)[0]
    return SkeletonPath(states, seed=check_seed(seed), scheme="ExactImmigration")


# --------------------------------------------------------------------------
# Euler scheme
# --------------------------------------------------------------------------
def euler_drift_matrix(params, derived):
    """``D`` with ``D e_j = B~ e_j - int z mu_j(dz)``."""
    D = np.array(derived.tB, dtype=float)
    for j, m in enumerate(params.mu):
        D[:, j] -= m.first_moment()
    return D


def _inverse_poisson(u, mean):
    """Poisson quantile of uniforms ``u`` at elementwise means ``mean``."""
    k = np.zeros(u.shape)
    p = np.exp(-mean)
    F = p.copy()
    active = u > F
    limit = mean + 20.0 * np.sqrt(mean) + 50.0
    while active.any():
        k = np.where(active, k + 1.0, k)
        p = np.where(active, p * mean / np.maximum(k, 1.0), p)
        F = np.where(active, F + p, F)
        active = active & (u > F) & (k < limit)
    return k


def euler_batch(params, derived, n, h, seed, reps, start=0, x0=None):
    """Euler skeletons for replications ``start, ..., start + reps - 1``.

    Returns
    -------
    states : ndarray (reps, n + 1, 2)
        States read at integer times.
    clamps : ndarray (reps,)
        Number of clamped substeps per replication.
    """
    m = steps_per_unit(h)
    h = 1.0 / m
    check_seed(seed)
    n = int(n)
    x0 = _start(x0)
    gens = [stream(seed, start + r) for r in range(reps)]
    D = euler_drift_matrix(params, derived)
    beta = np.asarray(params.beta, dtype=float)[:, None]
    Dc0 = D[:, :1]
    Dc1 = D[:, 1:]
    diff_scale = np.sqrt(2.0 * np.asarray(params.c) * h)[:, None]
    has_diff = bool(np.any(params.c > 0))
    nu = params.nu
    mu_atoms = [(j, z, w) for j, mj in enumerate(params.mu) for z, w in zip(mj.z, mj.w)]

    X = np.repeat(x0[:, None], reps, axis=1)
    out = np.empty((reps, n + 1, 2))
    out[:, 0, :] = x0
    clamps = np.zeros(reps, dtype=np.int64)
    units_per_chunk = max(1, _CHUNK_SUBSTEPS // m)
    for k0 in range(0, n, units_per_chunk):
        K = min(units_per_chunk, n - k0)
        L = K * m
        if has_diff:
            G = np.stack([g.standard_normal((L, 2)) for g in gens], axis=-1) * diff_scale
        if len(nu):
            cnt = np.stack([g.poisson(h * nu.w, size=(L, len(nu))) for g in gens], axis=-1)
            J = np.zeros((L, 2, reps))
            for a in range(len(nu)):
                J += cnt[:, a, None, :] * nu.z[a][None, :, None]
        if mu_atoms:
            Ub = np.stack([g.random((L, len(mu_atoms))) for g in gens], axis=-1)
        for s in range(L):
            Y = X + h * (beta + Dc0 * X[0] + Dc1 * X[1])
            if has_diff:
                Y += G[s] * np.sqrt(X)
            if len(nu):
                Y += J[s]
            for a, (j, z, w) in enumerate(mu_atoms):
                c = _inverse_poisson(Ub[s, a], h * w * X[j])
                Y += c[None, :] * z[:, None]
            neg = Y < 0.0
            if neg.any():
                clamps += neg.any(axis=0)
                np.maximum(Y, 0.0, out=Y)
            X = Y
            if (s + 1) % m == 0:
                out[:, k0 + (s + 1) // m, :] = X.T
    return out, clamps


def simulate_euler(params, derived, T, h, seed, x0=None, index=0):
    """Euler skeleton of the jump-diffusion read at times ``0, 1, ..., T``.

    Parameters
    ----------
    T : int
        Number of unit observation steps.
    h : float
        Substep length; ``1 / h`` must be an integer.

    Raises
    ------
    InvalidStep
        If ``h`` is not in ``(0, 1]`` or ``1 / h`` is not an integer.
    """
    m = steps_per_unit(h)
    states, clamps = euler_batch(params, derived, T, h, seed, 1, start=index, x0=x0)
    return SkeletonPath(states[0], seed=check_seed(seed), scheme=f"Euler(1/{m})", clamp_count=int(clamps[0]))


def simulate_skeleton(params, derived, n, seed, h=1.0 / 256, index=0):
    """Exact sampler when available, Euler with step ``h`` otherwise."""
    if params.is_pure_immigration():
        return simulate_exact_immigration(params, derived, n, seed, index=index)
    return simulate_euler(params, derived, n, h, seed, index=index)


def skeleton_batch(params, derived, n, seed, reps, start=0, h=1.0 / 256):
    """Batch counterpart of :func:`simulate_skeleton`; returns states only."""
    if params.is_pure_immigration():
        return exact_immigration_batch(params, derived, n, seed, reps, start=start)
    return euler_batch(params, derived, n, h, seed, reps, start=start)[0]


# --------------------------------------------------------------------------
# limit processes
# --------------------------------------------------------------------------
def _limit_steps(h):
    if not 0 < h <= 0.01:
        raise InvalidStep(f"limit step h = {h!r} must lie in (0, 0.01]")
    return steps_per_unit(h)


def limit_Y_batch(derived, kit, h, seed, reps, start=0):
    """Euler paths of ``dY = <u, beta~> dt + sqrt(<Cbar u, u> Y^+) dW``, ``Y_0 = 0``.

    Returns
    -------
    ndarray (reps, N + 1)
        Paths on the grid ``t = 0, h, ..., 1``.
    """
    N = _limit_steps(h)
    h = 1.0 / N
    a = float(derived.tbeta[0] + derived.tbeta[1])
    b = float(np.ones(2) @ kit.Cbar @ np.ones(2))
    Z = np.stack([stream(seed, LIMIT_STREAM_OFFSET + start + r).standard_normal(N) for r in range(reps)], axis=-1)
    out = np.zeros((reps, N + 1))
    y = np.zeros(reps)
    sb = math.sqrt(max(b, 0.0) * h)
    for k in range(N):
        y = y + a * h + sb * np.sqrt(np.maximum(y, 0.0)) * Z[k]
        out[:, k + 1] = y
    return out


def simulate_limit_Y(derived, kit, h, seed, index=0):
    """One path of the limit diffusion ``Y`` on ``[0, 1]``.

    Returns
    -------
    t, y : ndarray
    """
    y = limit_Y_batch(derived, kit, h, seed, 1, start=index)[0]
    return np.linspace(0.0, 1.0, y.size), y


def psd_sqrt(A):
    """Symmetric PSD square root with negative eigenvalues clipped at 0."""
    w, Q = np.linalg.eigh(0.5 * (A + A.T))
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


@dataclass(frozen=True, eq=False)
class LimitDraw:
    """One draw of the limit functionals.

    Attributes
    ----------
    M1 : ndarray (2,)
        Terminal value of the martingale limit.
    intY, intY2 : float
        ``int_0^1 Y dt`` and ``int_0^1 Y^2 dt`` (trapezoidal rule).
    intY_dMu : float
        Ito sum for ``int_0^1 Y d<u, M>``.
    intY_dWtilde : float
        Ito sum for ``int_0^1 Y dW~`` with ``W~`` a Brownian motion independent
        of ``M``; it drives the limit of the ``delta`` and ``gamma`` estimators
        when ``<Ctilde v, v> > 0``.
    I : float
        ``(intY_dMu - <u, M1> intY) / (intY2 - intY^2)``.
    h : float
    """

    M1: np.ndarray
    intY: float
    intY2: float
    intY_dMu: float
    intY_dWtilde: float
    I: float
    h: float


def _limit_block(derived, kit, h, seed, reps, start, keep_path=False):
    N = _limit_steps(h)
    h = 1.0 / N
    a = float(derived.tbeta[0] + derived.tbeta[1])
    S = psd_sqrt(kit.Ctilde)
    Z = np.stack(
        [stream(seed, LIMIT_STREAM_OFFSET + start + r).standard_normal((N, 3)) for r in range(reps)], axis=-1
    )
    sh = math.sqrt(h)
    M = np.zeros((2, reps))
    y = np.zeros(reps)
    sum_y = np.zeros(reps)
    sum_y2 = np.zeros(reps)
    dmu = np.zeros(reps)
    dwt = np.zeros(reps)
    path = np.zeros((N + 1, 3)) if keep_path else None
    for k in range(N):
        scale = sh * np.sqrt(np.maximum(y, 0.0))
        z0 = Z[k, 0] * scale
        z1 = Z[k, 1] * scale
        dM = np.stack((S[0, 0] * z0 + S[0, 1] * z1, S[1, 0] * z0 + S[1, 1] * z1))
        du = dM[0] + dM[1]
        dmu += y * du
        dwt += y * (sh * Z[k, 2])
        sum_y += y
        sum_y2 += y * y
        M = M + dM
        y = M[0] + M[1] + a * (k + 1) * h
        if keep_path:
            path[k + 1] = (y[0], M[0, 0], M[1, 0])
    # trapezoidal rule: drop half of the endpoint values (Y_0 = 0)
    intY = h * (sum_y + 0.5 * y)
    intY2 = h * (sum_y2 + 0.5 * y * y)
    den = intY2 - intY**2
    if np.any(den < DENOMINATOR_TOL):
        raise DegenerateDenominator(f"int Y^2 - (int Y)^2 = {float(den.min()):.3e} is numerically zero")
    I = (dmu - (M[0] + M[1]) * intY) / den
    draws = dict(M1=M.T.copy(), intY=intY, intY2=intY2, intY_dMu=dmu, intY_dWtilde=dwt, I=I)
    return draws, path


def limit_joint_batch(derived, kit, h, seed, reps, start=0):
    """Vectorised :func:`sample_limit_joint` for draws ``start, ..., start + reps - 1``.

    Returns
    -------
    dict of ndarray
        Keys ``M1`` (reps, 2), ``intY``, ``intY2``, ``intY_dMu``,
        ``intY_dWtilde`` and ``I`` (each (reps,)).
    """
    return _limit_block(derived, kit, h, seed, reps, start)[0]


def sample_limit_joint(derived, kit, h, seed, index=0):
    """Joint Euler draw of ``(M, Y)`` and the functionals entering ``I``.

    ``dM = sqrt(Y^+) Ctilde^{1/2} dW`` with ``Y = <u, M> + <u, beta~> t``.

    Raises
    ------
    DegenerateDenominator
        If ``int Y^2 dt - (int Y dt)^2 < 1e-14``.
    """
    d, _ = _limit_block(derived, kit, h, seed, 1, index)
    return LimitDraw(
        M1=d["M1"][0],
        intY=float(d["intY"][0]),
        intY2=float(d["intY2"][0]),
        intY_dMu=float(d["intY_dMu"][0]),
        intY_dWtilde=float(d["intY_dWtilde"][0]),
        I=float(d["I"][0]),
        h=1.0 / _limit_steps(h),
    )


def limit_path(derived, kit, h, seed, index=0):
    """Grid path ``(t, y, m1, m2)`` of the joint limit process on [0, 1]."""
    _, path = _limit_block(derived, kit, h, seed, 1, index, keep_path=True)
    t = np.linspace(0.0, 1.0, path.shape[0])
    return t, path[:, 0], path[:, 1], path[:, 2]
