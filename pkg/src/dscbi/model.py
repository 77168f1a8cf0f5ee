"""Parameters, derived quantities and the parameter transforms of a
two-type doubly symmetric CBI process.

A parameter set consists of diffusion coefficients ``c``, a drift ``beta``,
an essentially nonnegative 2x2 matrix ``B`` and three finite discrete jump
measures: the immigration measure ``nu`` and the branching measures ``mu1``,
``mu2``.  The modified branching matrix

    B~[i, j] = B[i, j] + sum over atoms (z, w) of mu_j of w * (z_i - [i == j])^+

governs the conditional mean.  When ``B~`` is doubly symmetric, i.e.
``B~ = [[gamma, kappa], [kappa, gamma]]``, its exponential has the
two-term spectral form

    exp(t B~) = (rho^t / 2) u u^T + (delta^t / 2) v v^T,

with ``u = (1, 1)``, ``v = (1, -1)``, ``rho = exp(gamma + kappa)`` and
``delta = exp(gamma - kappa)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    InvalidMeasureAtom,
    InvalidParameter,
    NonPositiveEigenvalue,
    NotDoublySymmetric,
    NotIrreducible,
)

SYMMETRY_TOL = 1e-12
CRITICAL_TOL = 1e-12
CRITICAL_WARN = 1e-6
_LOG_BRANCH = 1e-8

U = np.array([1.0, 1.0])
V = np.array([1.0, -1.0])
UTILDE = np.array([0.5, 0.5])


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class JumpMeasure:
    """Finite discrete measure on the nonnegative quadrant minus the origin.

    Parameters
    ----------
    atoms : sequence of (z1, z2, w)
        Atom locations ``(z1, z2)`` with weights ``w``.  Every atom must
        satisfy ``z1 >= 0``, ``z2 >= 0``, ``(z1, z2) != (0, 0)`` and
        ``w > 0``.

    Attributes
    ----------
    z : ndarray, shape (k, 2)
        Atom locations.
    w : ndarray, shape (k,)
        Atom weights.
    """

    __slots__ = ("z", "w")

    def __init__(self, atoms=()):
        rows = [tuple(float(x) for x in a) for a in atoms]
        for r in rows:
            if len(r) != 3:
                raise InvalidMeasureAtom(f"atom must be (z1, z2, w), got {r!r}")
            z1, z2, w = r
            if not all(math.isfinite(x) for x in r):
                raise InvalidMeasureAtom(f"non-finite atom {r!r}")
            if z1 < 0 or z2 < 0:
                raise InvalidMeasureAtom(f"atom location must be nonnegative, got {r!r}")
            if z1 == 0 and z2 == 0:
                raise InvalidMeasureAtom("atom location (0, 0) is not allowed")
            if not w > 0:
                raise InvalidMeasureAtom(f"atom weight must be positive, got {r!r}")
        arr = np.array(rows, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "z", _frozen(arr[:, :2]))
        object.__setattr__(self, "w", _frozen(arr[:, 2]))

    def __setattr__(self, name, value):
        raise AttributeError("JumpMeasure is immutable")

    def __reduce__(self):
        return (JumpMeasure, (self.atoms,))

    def __len__(self):
        return self.w.shape[0]

    def __repr__(self):
        inner = ", ".join(f"({a:g}, {b:g}, {w:g})" for (a, b), w in zip(self.z, self.w))
        return f"JumpMeasure([{inner}])"

    @property
    def atoms(self):
        """List of ``(z1, z2, w)`` tuples."""
        return [(float(a), float(b), float(w)) for (a, b), w in zip(self.z, self.w)]

    @property
    def total_mass(self):
        """Total weight ``sum w``."""
        return float(self.w.sum())

    def is_empty(self):
        return len(self) == 0

    def first_moment(self):
        """Integral of ``z``, a length-2 vector."""
        return self.w @ self.z if len(self) else np.zeros(2)

    def second_moment(self):
        """Integral of ``z z^T``, a 2x2 matrix."""
        if not len(self):
            return np.zeros((2, 2))
        M = (self.z * self.w[:, None]).T @ self.z
        return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Admissible parameter set with finite discrete jump measures.

    Parameters
    ----------
    c : (2,) array_like
        Nonnegative diffusion coefficients.
    beta : (2,) array_like
        Nonnegative drift of the immigration mechanism.
    B : (2, 2) array_like
        Drift matrix with nonnegative off-diagonal entries.
    nu, mu1, mu2 : JumpMeasure, optional
        Immigration and branching jump measures.
    """

    c: np.ndarray
    beta: np.ndarray
    B: np.ndarray
    nu: JumpMeasure = None
    mu1: JumpMeasure = None
    mu2: JumpMeasure = None

    def __post_init__(self):
        c = _frozen(self.c).reshape(-1)
        beta = _frozen(self.beta).reshape(-1)
        B = _frozen(self.B)
        if c.shape != (2,) or beta.shape != (2,) or B.shape != (2, 2):
            raise InvalidParameter("c and beta must have length 2 and B must be 2x2")
        for name, arr in (("c", c), ("beta", beta), ("B", B)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameter(f"{name} has non-finite entries")
        if np.any(c < 0):
            raise InvalidParameter("diffusion coefficients c must be nonnegative")
        if np.any(beta < 0):
            raise InvalidParameter("drift beta must be nonnegative")
        if B[0, 1] < 0 or B[1, 0] < 0:
            raise InvalidParameter("B must have nonnegative off-diagonal entries")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "B", B)
        for name in ("nu", "mu1", "mu2"):
            m = getattr(self, name)
            if m is None:
                m = JumpMeasure()
            elif not isinstance(m, JumpMeasure):
                m = JumpMeasure(m)
            object.__setattr__(self, name, m)

    @property
    def mu(self):
        """Branching measures as a pair ``(mu1, mu2)``."""
        return (self.mu1, self.mu2)

    def is_pure_immigration(self):
        """True when ``c = 0`` and both branching measures are empty."""
        return bool(np.all(self.c == 0) and self.mu1.is_empty() and self.mu2.is_empty())


def modified_branching_matrix(params):
    """Return the raw modified branching matrix ``B~`` (no symmetry check).

    Column ``j`` collects ``B[:, j]`` plus the integral of
    ``(z_i - [i == j])^+`` against ``mu_j``.
    """
    tB = np.array(params.B, dtype=float)
    for j, m in enumerate(params.mu):
        if m.is_empty():
            continue
        for i in range(2):
            shift = 1.0 if i == j else 0.0
            tB[i, j] += float(m.w @ np.maximum(m.z[:, i] - shift, 0.0))
    return tB


def modified_immigration(params):
    """Return ``beta~ = beta + integral of z against nu``."""
    return np.asarray(params.beta, dtype=float) + params.nu.first_moment()


def integral_of_power(log_x):
    """Return ``int_0^1 x^s ds`` given ``log x``.

    The removable singularity at ``x = 1`` is filled with its limit 1; for
    ``|log x| < 1e-8`` the expansion ``1 + log(x)/2`` is used.
    """
    l = float(log_x)
    if abs(l) < _LOG_BRANCH:
        return 1.0 + 0.5 * l
    return math.expm1(l) / l


@dataclass(frozen=True, eq=False)
class DerivedParams:
    """Quantities derived from a doubly symmetric parameter set.

    Attributes
    ----------
    tB : ndarray (2, 2)
        Modified branching matrix ``[[gamma, kappa], [kappa, gamma]]``.
    tbeta : ndarray (2,)
        Modified immigration mean ``beta~``.
    obeta : ndarray (2,)
        One-step mean from the origin, ``(int_0^1 exp(s B~) ds) beta~``.
    gamma, kappa : float
    rho, delta : float
        Eigenvalues ``exp(gamma + kappa)`` and ``exp(gamma - kappa)`` of
        ``exp(B~)``.
    s : float
        Criticality parameter ``gamma + kappa``.
    trho, tdelta : float
        ``int_0^1 rho^s ds`` and ``int_0^1 delta^s ds``.
    """

    tB: np.ndarray
    tbeta: np.ndarray
    obeta: np.ndarray
    gamma: float
    kappa: float
    rho: float
    delta: float
    s: float
    trho: float
    tdelta: float

    u = U
    v = V
    utilde = UTILDE

    @property
    def log_rho(self):
        return self.gamma + self.kappa

    @property
    def log_delta(self):
        return self.gamma - self.kappa

    @property
    def eigen_logs(self):
        """Logarithms ``(log rho, log delta)`` of the eigenvalues of ``exp(B~)``."""
        return (self.gamma + self.kappa, self.gamma - self.kappa)


def derived_from(gamma, kappa, tbeta):
    """Assemble :class:`DerivedParams` from ``(gamma, kappa, beta~)``."""
    gamma = float(gamma)
    kappa = float(kappa)
    tbeta = _frozen(tbeta)
    rho, delta, obeta = h_forward(gamma, kappa, tbeta)
    return DerivedParams(
        tB=_frozen([[gamma, kappa], [kappa, gamma]]),
        tbeta=tbeta,
        obeta=_frozen(obeta),
        gamma=gamma,
        kappa=kappa,
        rho=rho,
        delta=delta,
        s=gamma + kappa,
        trho=integral_of_power(gamma + kappa),
        tdelta=integral_of_power(gamma - kappa),
    )


def build_derived(params):
    """Compute ``B~``, ``beta~``, ``beta-bar`` and the spectral quantities.

    Raises
    ------
    NotDoublySymmetric
        If the diagonal or the off-diagonal entries of ``B~`` differ by more
        than 1e-12.
    NotIrreducible
        If ``kappa <= 0``.
    """
    tB = modified_branching_matrix(params)
    if abs(tB[0, 0] - tB[1, 1]) > SYMMETRY_TOL or abs(tB[0, 1] - tB[1, 0]) > SYMMETRY_TOL:
        raise NotDoublySymmetric(f"modified branching matrix {tB.tolist()} is not doubly symmetric")
    gamma = 0.5 * (tB[0, 0] + tB[1, 1])
    kappa = 0.5 * (tB[0, 1] + tB[1, 0])
    if not kappa > 0:
        raise NotIrreducible(f"kappa = {kappa!r} must be positive")
    return derived_from(gamma, kappa, modified_immigration(params))


def expm_tB(derived, t):
    """Matrix exponential ``exp(t B~)`` by the two-term spectral formula."""
    lr, ld = derived.eigen_logs
    a = 0.5 * math.exp(t * lr)
    b = 0.5 * math.exp(t * ld)
    return np.array([[a + b, a - b], [a - b, a + b]])


def integral_expm(derived, t=1.0):
    """``int_0^t exp(s B~) ds`` in closed form."""
    lr, ld = derived.eigen_logs
    a = 0.5 * t * integral_of_power(t * lr)
    b = 0.5 * t * integral_of_power(t * ld)
    return np.array([[a + b, a - b], [a - b, a + b]])


class Criticality(Enum):
    SUBCRITICAL = "Subcritical"
    CRITICAL = "Critical"
    SUPERCRITICAL = "Supercritical"


def classify(derived):
    """Classify the model by the sign of ``s = gamma + kappa``.

    A warning is issued when ``|s|`` lies in ``(1e-12, 1e-6)``, where the
    classification is numerically fragile.
    """
    if not derived.kappa > 0:
        raise NotIrreducible(f"kappa = {derived.kappa!r} must be positive")
    s = derived.s
    if CRITICAL_TOL < abs(s) < CRITICAL_WARN:
        warnings.warn(f"criticality parameter s = {s:.3e} is close to zero", RuntimeWarning, stacklevel=2)
    if abs(s) <= CRITICAL_TOL:
        return Criticality.CRITICAL
    return Criticality.SUBCRITICAL if s < 0 else Criticality.SUPERCRITICAL


def h_forward(gamma, kappa, tbeta):
    """Map ``(gamma, kappa, beta~)`` to ``(rho, delta, beta-bar)``."""
    tbeta = np.asarray(tbeta, dtype=float)
    lr = gamma + kappa
    ld = gamma - kappa
    a = 0.5 * integral_of_power(lr) * (tbeta[0] + tbeta[1])
    b = 0.5 * integral_of_power(ld) * (tbeta[0] - tbeta[1])
    return math.exp(lr), math.exp(ld), np.array([a + b, a - b])


def h_inverse(rho, delta, obeta):
    """Map ``(rho, delta, beta-bar)`` back to ``(gamma, kappa, beta~)``.

    Raises
    ------
    NonPositiveEigenvalue
        If ``rho <= 0`` or ``delta <= 0``.
    """
    if not (rho > 0 and delta > 0):
        raise NonPositiveEigenvalue(f"rho = {rho!r} and delta = {delta!r} must be positive")
    obeta = np.asarray(obeta, dtype=float)
    lr = math.log(rho)
    ld = math.log(delta)
    a = 0.5 * (obeta[0] + obeta[1]) / integral_of_power(lr)
    b = 0.5 * (obeta[0] - obeta[1]) / integral_of_power(ld)
    return 0.5 * (lr + ld), 0.5 * (lr - ld), np.array([a + b, a - b])
