"""Shared models and independent oracles for the test suite."""

import math

import numpy as np
import pytest

from dscbi.model import JumpMeasure, ModelParams, build_derived
from dscbi.moments import v_matrices

CRIT_B = [[-1.0, 1.0], [1.0, -1.0]]


def make_model(c=(0, 0), beta=(0, 0), B=CRIT_B, nu=(), mu1=(), mu2=()):
    return ModelParams(c=list(c), beta=list(beta), B=B, nu=JumpMeasure(nu), mu1=JumpMeasure(mu1), mu2=JumpMeasure(mu2))


def model_a():
    """Pure immigration, jumps along the Perron direction."""
    return make_model(beta=(0.5, 0.5), nu=[(1, 1, 1)])


def model_b():
    """Pure immigration, jumps off the Perron direction."""
    return make_model(nu=[(2, 0, 0.5), (0, 2, 0.5)])


def model_c():
    """Diffusive branching with immigration."""
    return make_model(c=(0.5, 0.5), beta=(1, 1), nu=[(1, 1, 1)])


def model_d():
    """Critical model with branching jumps in both types."""
    return make_model(
        c=(0.3, 0.5),
        beta=(0.2, 0.4),
        B=[[-1.4, 1.0], [1.0, -1.4]],
        nu=[(1, 0.5, 0.7)],
        mu1=[(0.5, 1.0, 0.4)],
        mu2=[(1.0, 0.5, 0.4)],
    )


def kit_for(params):
    d = build_derived(params)
    return d, v_matrices(params, d)


def expm_series(A, terms=30):
    """Scaling-and-squaring Taylor matrix exponential, independent of the library."""
    A = np.asarray(A, dtype=float)
    norm = max(float(np.abs(A).sum(axis=1).max()), 1e-300)
    k = max(0, int(math.ceil(math.log2(norm))) + 1)
    X = A / 2.0**k
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for i in range(1, terms):
        term = term @ X / i
        out = out + term
    for _ in range(k):
        out = out @ out
    return out


def random_critical_model(rng, pure=False):
    """Random doubly symmetric critical model with finite discrete measures.

    Branching atoms have coordinates at most 1, so they only shift the
    off-diagonal entries of ``B~`` by ``w z_i``; ``B`` compensates for that.
    """
    kappa = rng.uniform(0.3, 2.0)
    a, b = rng.uniform(0.0, 1.0, 2)
    w = rng.uniform(0.1, 0.5)
    shift = 0.0 if pure else w * b
    mu1 = [] if pure else [(a, b, w)]
    mu2 = [] if pure else [(b, a, w)]
    B = [[-kappa, kappa - shift], [kappa - shift, -kappa]]
    c = (0.0, 0.0) if pure else tuple(rng.uniform(0, 1, 2))
    nu = [(rng.uniform(0.1, 2), rng.uniform(0, 2), rng.uniform(0.2, 1)), (rng.uniform(0, 2), rng.uniform(0.1, 2), 0.3)]
    return make_model(c=c, beta=tuple(rng.uniform(0, 1, 2)), B=B, nu=nu, mu1=mu1, mu2=mu2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
