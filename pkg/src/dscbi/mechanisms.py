"""Branching and immigration mechanisms and the Laplace transform of the
transition semigroup.

For ``lambda`` in the nonnegative quadrant,

    phi_i(lambda) = c_i lambda_i^2 - <B e_i, lambda>
                    + int (exp(-<lambda, z>) - 1 + lambda_i min(1, z_i)) mu_i(dz),
    psi(lambda)   = <beta, lambda> + int (1 - exp(-<lambda, z>)) nu(dz),

and ``v(t, lambda)`` solves ``d/dt v = -phi(v)``, ``v(0) = lambda``.  Started
from the origin, ``E exp(-<lambda, X_t>) = exp(-int_0^t psi(v(s, lambda)) ds)``.
These formulas do not involve any simulation, so they serve as an
independent check on the path samplers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .errors import StepUnderflow
from .model import ModelParams, build_derived

CLAMP_TOL = 1e-12
UNDERFLOW_TOL = 1e-6
STEPS_PER_UNIT = 1000


@dataclass(frozen=True, eq=False)
class MechanismContext:
    """A parameter set together with its derived quantities."""

    params: ModelParams
    derived: object

    @classmethod
    def from_params(cls, params):
        return cls(params, build_derived(params))


def _phi_all(params, lam):
    lam = np.asarray(lam, dtype=float)
    out = params.c * lam**2 - params.B.T @ lam
    for i, m in enumerate(params.mu):
        if len(m):
            e = np.exp(-(m.z @ lam))
            out[i] += m.w @ (e - 1.0 + lam[i] * np.minimum(1.0, m.z[:, i]))
    return out


def phi(ctx, i, lam):
    """Branching mechanism ``phi_i(lambda)`` for type ``i`` in ``{1, 2}``."""
    if i not in (1, 2):
        raise ValueError("type index must be 1 or 2")
    return float(_phi_all(ctx.params, lam)[i - 1])


def psi(ctx, lam):
    """Immigration mechanism ``psi(lambda)``."""
    p = ctx.params
    lam = np.asarray(lam, dtype=float)
    val = float(p.beta @ lam)
    if len(p.nu):
        val += float(p.nu.w @ (-np.expm1(-(p.nu.z @ lam))))
    return val


def _default_steps(t):
    return max(1, int(math.ceil(STEPS_PER_UNIT * t)))


def _clamp(y):
    low = y.min()
    if low < 0:
        if low < -UNDERFLOW_TOL:
            raise StepUnderflow(f"ODE solution undershoots to {low:.3e}")
        if low < -CLAMP_TOL:
            warnings.warn(f"clamping ODE undershoot {low:.3e} to zero", RuntimeWarning, stacklevel=3)
        y = np.maximum(y, 0.0)
    return y


def _rk4_grid(params, t, lam, nsteps):
    h = t / nsteps
    f = lambda y: -_phi_all(params, y)
    grid = np.empty((nsteps + 1, 2))
    y = np.asarray(lam, dtype=float).copy()
    grid[0] = y
    for k in range(nsteps):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = _clamp(y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        grid[k + 1] = y
    return grid


def _check_args(t, lam, nsteps):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (2,) or np.any(lam < 0):
        raise ValueError("lambda must be a nonnegative 2-vector")
    if not t >= 0:
        raise ValueError("t must be nonnegative")
    if nsteps is None:
        nsteps = _default_steps(t)
    if nsteps < 1:
        raise ValueError("nsteps must be a positive integer")
    return lam, int(nsteps)


def solve_v(ctx, t, lam, nsteps=None):
    """Solve ``d/dt v = -phi(v)`` on ``[0, t]`` with classical RK4.

    Parameters
    ----------
    ctx : MechanismContext
    t : float
        Final time, ``t >= 0``.
    lam : (2,) array_like
        Nonnegative initial value.
    nsteps : int, optional
        Number of RK4 steps; defaults to 1000 per unit time.

    Returns
    -------
    ndarray (2,)
        ``v(t, lambda)``, componentwise nonnegative.
    """
    lam, nsteps = _check_args(t, lam, nsteps)
    if t == 0:
        return lam.copy()
    return _rk4_grid(ctx.params, t, lam, nsteps)[-1]


def laplace_from_zero(ctx, t, lam, nsteps=None):
    """``E[exp(-<lambda, X_t>) | X_0 = 0]`` from the mechanisms.

    The psi-integral along the RK4 grid uses Simpson's rule.
    """
    lam, nsteps = _check_args(t, lam, nsteps)
    if t == 0:
        return 1.0
    grid = _rk4_grid(ctx.params, t, lam, nsteps)
    vals = np.array([psi(ctx, y) for y in grid])
    integral = float(simpson(vals, dx=t / nsteps))
    return math.exp(-integral)
