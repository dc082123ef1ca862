"""Shared oracles and reference fields for the test suite.

The oracles here are deliberately independent of the library's internals:
the determinant is expanded from the permutation sum, and derivatives are
re-checked with local central differences written out inline.
"""

import itertools

import numpy as np
import pytest

import homoflow as hf

TWO_PI = 2.0 * np.pi


def leibniz_det(A):
    """Permutation-sum determinant; the cofactor-free oracle."""
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    total = np.zeros(A.shape[:-2])
    for perm in itertools.permutations(range(n)):
        sign = 1.0
        seen = list(perm)
        for i in range(n):
            for j in range(i + 1, n):
                if seen[i] > seen[j]:
                    sign = -sign
        term = np.ones(A.shape[:-2])
        for i, p in enumerate(perm):
            term = term * A[..., i, p]
        total = total + sign * term
    return total


def central_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = 1.0
        out[..., j] = (f(x + h * e) - f(x - h * e)) / (2.0 * h)
    return out


def central_jac(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    out = np.empty(x.shape + (n,))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        out[..., :, j] = (f(x + h * e) - f(x - h * e)) / (2.0 * h)
    return out


def shear_velocity():
    """a(x) = (0, sin x1): bounded, divergence free, flow in closed form."""
    def ev(x):
        return np.stack([np.zeros(x.shape[:-1]), np.sin(x[..., 0])], axis=-1)

    def jac(x):
        z = np.zeros(x.shape[:-1])
        row1 = np.stack([z, z], axis=-1)
        row2 = np.stack([np.cos(x[..., 0]), z], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def div(x):
        return np.zeros(x.shape[:-1])

    return hf.VectorField(2, ev, jac, div, sup_bound=1.0, div_bound=0.0)


def tanh_sine_velocity():
    """a(x) = (tanh x2, sin x2): bounded with nonzero divergence cos x2."""
    def ev(x):
        return np.stack([np.tanh(x[..., 1]), np.sin(x[..., 1])], axis=-1)

    def jac(x):
        j = np.zeros(x.shape[:-1] + (2, 2))
        j[..., 0, 1] = 1.0 / np.cosh(x[..., 1]) ** 2
        j[..., 1, 1] = np.cos(x[..., 1])
        return j

    def div(x):
        return np.cos(x[..., 1])

    return hf.VectorField(2, ev, jac, div, sup_bound=2.0, div_bound=1.0)


def oscillating_velocity(eps, base=None):
    """base velocity plus the rotated gradient of (1/4pi^2) sin sin at scale eps.

    The perturbation is divergence free, so the divergence equals the base's
    exactly at every eps.
    """
    base = base if base is not None else tanh_sine_velocity()
    eps = float(eps)

    def ev(x):
        y = x / eps
        gp = np.stack([np.cos(TWO_PI * y[..., 0]) * np.sin(TWO_PI * y[..., 1]),
                       np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1])],
                      axis=-1) / TWO_PI
        return base.eval(x) + hf.rot_perp(gp)

    def jac(x):
        y = x / eps
        c1, s1 = np.cos(TWO_PI * y[..., 0]), np.sin(TWO_PI * y[..., 0])
        c2, s2 = np.cos(TWO_PI * y[..., 1]), np.sin(TWO_PI * y[..., 1])
        j = np.empty(x.shape[:-1] + (2, 2))
        j[..., 0, 0] = c1 * c2 / eps
        j[..., 0, 1] = -s1 * s2 / eps
        j[..., 1, 0] = s1 * s2 / eps
        j[..., 1, 1] = -c1 * c2 / eps
        return j + base.jacobian(x)

    return hf.VectorField(2, ev, jac, base.divergence,
                          sup_bound=(base.sup_bound or 0.0) + 0.3,
                          div_bound=base.div_bound)


def deltagamma_system(eps, delta=0.3, gamma=0.3):
    return hf.periodic_family(hf.deltagamma_cell(delta, gamma), eps,
                              label="deltagamma")


def shear_system(eps, gamma=0.3):
    return hf.periodic_family(hf.shear_cell(gamma), eps, label="shear")


def identity_system(eps=0.2):
    return hf.periodic_family(hf.identity_cell(2), eps, label="identity")


def twist_system(eps, beta_amp=1.0):
    """Canonical twist instance: alpha = id, beta = (amp*eps) sin(t/eps)."""
    beta = hf.sine_curve(beta_amp * eps, 1.0 / eps) if beta_amp else hf.zero_curve()
    return hf.hyperbolic_twist_family(hf.identity_curve(), beta, eps,
                                      label="example31")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def unit_bump():
    return hf.bump_datum(2, [0.0, 0.0], 1.0, 1.0)
