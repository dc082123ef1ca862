"""Analytic field algebra: scalar/vector fields with exact derivatives and the
generator families for rectified drift systems.

Conventions used throughout the package:

* points are float arrays of shape ``(..., N)`` and every field callable is
  vectorized over the leading axes;
* a scalar field maps ``(..., N) -> (...)``, its gradient to ``(..., N)``;
* a vector field maps ``(..., N) -> (..., N)`` and its Jacobian to
  ``(..., N, N)`` with ``jac[..., i, j] = d(component i)/d(x_j)``, so row ``i``
  is the gradient of component ``i``;
* under this layout the rectification identity reads
  ``jac(W) @ b = theta * e1``: the drift is orthogonal to the gradients of all
  components of the straightening map except the first.

Every evaluator is a pure function and systems carry no mutable state, so
evaluation is safe from concurrent threads; construction is single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

TWO_PI = 2.0 * math.pi

# Finite-difference fallback step scale for user-supplied fields; generator
# families always carry hand-coded exact derivatives.
FD_STEP = 1e-5


class FieldError(ValueError):
    """Contract violation in field construction or evaluation."""


class InvalidMeasureError(FieldError):
    """A candidate invariant density touches zero or goes negative."""


class InvalidFamilyError(FieldError):
    """Generator family parameters violate the family's hypotheses."""


class InvalidCellError(FieldError):
    """Periodic cell map fails orientation/positivity on the unit cell."""


def as_points(x, dim: int) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,):
        raise FieldError(f"expected points of shape (..., {dim}), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# core field containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """Scalar field with an exact analytic gradient.

    ``hess`` (the symmetric second-derivative matrix, shape ``(..., N, N)``)
    is optional; it unlocks exact drift Jacobians downstream.  ``exact`` is
    False when derivatives come from finite differences.
    """

    dim: int
    eval: Callable[[Array], Array]
    grad: Callable[[Array], Array]
    hess: Callable[[Array], Array] | None = None
    smoothness: str = "C1"
    exact: bool = True


@dataclass(frozen=True)
class VectorField:
    """Vector field with exact Jacobian and divergence.

    ``sup_bound``/``div_bound`` are optional uniform bounds on ``|field|`` and
    ``|div field|``; generator families estimate them by dense sampling and
    inflate the estimate, user fields may leave them absent.
    """

    dim: int
    eval: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]
    divergence: Callable[[Array], Array]
    sup_bound: float | None = None
    div_bound: float | None = None
    exact: bool = True


@dataclass(frozen=True)
class Diffeo:
    """Orientation-preserving C1 map with Jacobian.

    ``det`` is an optional dedicated determinant; flow maps pin it to
    ``exp(integrated divergence)`` so the Jacobian determinant and the
    Liouville value stay independently computed.
    """

    dim: int
    eval: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]
    det: Callable[[Array], Array] | None = None
    exact: bool = True

    def det_at(self, x: Array) -> Array:
        if self.det is not None:
            return self.det(x)
        return np.linalg.det(self.jacobian(x))


@dataclass(frozen=True)
class RectifiedSystem:
    """One member of an eps-indexed family (W, sigma, b, theta) plus its limit data.

    Contracts (checked by the diagnostics suite, not at construction):
    ``sigma_bounds[0] <= sigma <= sigma_bounds[1]``, ``theta > 0``,
    ``jac(W) @ b = theta * e1`` and ``det(jac(W)) = sigma * theta``.
    """

    dim: int
    eps: float
    W: Diffeo
    sigma: ScalarField
    b: VectorField
    theta: ScalarField
    sigma_bounds: tuple[float, float]
    limit_W: Diffeo
    limit_theta: ScalarField
    label: str = ""
    analytic: bool = True

    @property
    def stability_constant(self) -> float:
        """Smallest c >= 1 with 1/c <= sigma <= c, from the stored bounds."""
        lo, hi = self.sigma_bounds
        return max(hi, 1.0 / lo, 1.0)

    @property
    def sigma_ratio(self) -> float:
        """Upper bound on max(sigma)/min(sigma); controls Lp stability."""
        lo, hi = self.sigma_bounds
        return hi / lo


# ---------------------------------------------------------------------------
# simple constructors
# ---------------------------------------------------------------------------

def constant_scalar(dim: int, value: float) -> ScalarField:
    def ev(x):
        x = as_points(x, dim)
        return np.full(x.shape[:-1], float(value))

    def gr(x):
        x = as_points(x, dim)
        return np.zeros(x.shape)

    def he(x):
        x = as_points(x, dim)
        return np.zeros(x.shape + (dim,))

    return ScalarField(dim, ev, gr, he, smoothness="C2")


def coordinate_scalar(dim: int, axis: int) -> ScalarField:
    """The coordinate function x -> x[axis]."""
    e = np.zeros(dim)
    e[axis] = 1.0

    def ev(x):
        return as_points(x, dim)[..., axis]

    def gr(x):
        x = as_points(x, dim)
        return np.broadcast_to(e, x.shape).copy()

    def he(x):
        x = as_points(x, dim)
        return np.zeros(x.shape + (dim,))

    return ScalarField(dim, ev, gr, he, smoothness="C2")


def constant_vector(dim: int, value) -> VectorField:
    v = np.asarray(value, dtype=float)
    if v.shape != (dim,):
        raise FieldError(f"constant vector must have shape ({dim},)")

    def ev(x):
        x = as_points(x, dim)
        return np.broadcast_to(v, x.shape).copy()

    def jac(x):
        x = as_points(x, dim)
        return np.zeros(x.shape + (dim,))

    def div(x):
        x = as_points(x, dim)
        return np.zeros(x.shape[:-1])

    return VectorField(dim, ev, jac, div,
                       sup_bound=float(np.linalg.norm(v)), div_bound=0.0)


def identity_diffeo(dim: int) -> Diffeo:
    eye = np.eye(dim)

    def ev(x):
        return as_points(x, dim).copy()

    def jac(x):
        x = as_points(x, dim)
        return np.broadcast_to(eye, x.shape + (dim,)).copy()

    return Diffeo(dim, ev, jac)


def affine_diffeo(matrix) -> Diffeo:
    """x -> M x with det(M) > 0."""
    M = np.asarray(matrix, dtype=float)
    dim = M.shape[0]
    if M.shape != (dim, dim):
        raise FieldError("affine map needs a square matrix")
    if np.linalg.det(M) <= 0.0:
        raise FieldError("affine map must be orientation preserving")

    def ev(x):
        x = as_points(x, dim)
        return x @ M.T

    def jac(x):
        x = as_points(x, dim)
        return np.broadcast_to(M, x.shape + (dim,)).copy()

    return Diffeo(dim, ev, jac)


# ---------------------------------------------------------------------------
# finite-difference fallbacks (flagged approximate)
# ---------------------------------------------------------------------------

def _fd_steps(x: Array) -> Array:
    # per-point step 1e-5 * max(1, |x|)
    return FD_STEP * np.maximum(1.0, np.linalg.norm(x, axis=-1))


def fd_gradient(f: Callable[[Array], Array], x: Array, step: float | None = None) -> Array:
    """Central-difference gradient of a scalar function, one batched call."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = np.asarray(step if step is not None else _fd_steps(x))
    shifts = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        shifts.append(x + h[..., None] * e)
        shifts.append(x - h[..., None] * e)
    vals = f(np.stack(shifts, axis=0))
    out = np.empty(x.shape)
    for j in range(n):
        out[..., j] = (vals[2 * j] - vals[2 * j + 1]) / (2.0 * h)
    return out


def fd_jacobian(f: Callable[[Array], Array], x: Array, step: float | None = None) -> Array:
    """Central-difference Jacobian of a vector function, one batched call."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = np.asarray(step if step is not None else _fd_steps(x))
    shifts = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        shifts.append(x + h[..., None] * e)
        shifts.append(x - h[..., None] * e)
    vals = f(np.stack(shifts, axis=0))
    out = np.empty(x.shape + (n,))
    for j in range(n):
        out[..., :, j] = (vals[2 * j] - vals[2 * j + 1]) / (2.0 * h[..., None])
    return out


# ---------------------------------------------------------------------------
# cross product / rotation
# ---------------------------------------------------------------------------

def rot_perp(v: Array) -> Array:
    """Clockwise quarter turn in the plane: (v1, v2) -> (v2, -v1).

    For any C2 scalar w the rotated gradient rot_perp(grad w) is divergence
    free, which is what makes it the planar stand-in for the cross product.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 2:
        raise FieldError("rot_perp is only defined in dimension 2")
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


def cross_product(vectors: Sequence[Array]) -> Array:
    """Vector w with v . w = det(v, v2, ..., vN) for every v, N >= 3.

    Computed by cofactor expansion down the first column of the matrix whose
    columns are (., v2, ..., vN): component i is (-1)^i times the minor
    obtained by deleting row i from the column stack of the arguments.
    """
    vs = [np.asarray(v, dtype=float) for v in vectors]
    if not vs:
        raise FieldError("cross_product needs at least two vectors")
    n = vs[0].shape[-1]
    if n == 2:
        raise FieldError("use rot_perp in dimension 2")
    if n < 3:
        raise FieldError("cross_product requires dimension >= 3")
    if len(vs) != n - 1:
        raise FieldError(f"need {n - 1} vectors in dimension {n}, got {len(vs)}")
    for v in vs:
        if v.shape[-1] != n:
            raise FieldError("cross_product arguments must share one dimension")
    cols = np.stack(np.broadcast_arrays(*vs), axis=-1)  # (..., N, N-1)
    comps = []
    for i in range(n):
        minor = np.delete(cols, i, axis=-2)
        comps.append(((-1.0) ** i) * np.linalg.det(minor))
    return np.stack(comps, axis=-1)


# ---------------------------------------------------------------------------
# drift construction from stream fields
# ---------------------------------------------------------------------------

def _probe_grid(dim: int, lo: float = -2.0, hi: float = 2.0, m: int = 9) -> Array:
    axes = [np.linspace(lo, hi, m)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def drift_from_streamfields(streams: Sequence[ScalarField], sigma: ScalarField) -> VectorField:
    """Drift b with sigma * b equal to the cross of the stream gradients.

    In 2D the single stream w gives sigma*b = rot_perp(grad w); in higher
    dimension the N-1 streams give sigma*b = grad w2 x ... x grad wN.  The
    product sigma*b is divergence free by construction, so
    div b = -(grad sigma . b)/sigma exactly.  The drift Jacobian is exact when
    every stream carries a Hessian and sigma is exact, otherwise it falls back
    to central differences and the field is flagged approximate.
    """
    dim = sigma.dim
    n_streams = 1 if dim == 2 else dim - 1
    if len(streams) != n_streams:
        raise FieldError(f"dimension {dim} needs {n_streams} stream field(s)")
    for s in streams:
        if s.dim != dim:
            raise FieldError("stream fields must match sigma's dimension")

    probe = _probe_grid(dim)
    svals = sigma.eval(probe)
    if np.any(svals <= 0.0):
        bad = probe[np.argmin(svals)]
        raise InvalidMeasureError(f"sigma is not strictly positive, e.g. at {bad}")

    def density_flux(x):
        grads = [s.grad(x) for s in streams]
        if dim == 2:
            return rot_perp(grads[0])
        return cross_product(grads)

    def ev(x):
        x = as_points(x, dim)
        return density_flux(x) / sigma.eval(x)[..., None]

    have_hess = all(s.hess is not None for s in streams) and sigma.exact

    def flux_jacobian(x):
        if dim == 2:
            h = streams[0].hess(x)
            # rows of D(rot_perp(grad w)): (hess row 2, -hess row 1)
            return np.stack([h[..., 1, :], -h[..., 0, :]], axis=-2)
        grads = [s.grad(x) for s in streams]
        hesss = [s.hess(x) for s in streams]
        cols = []
        for j in range(dim):
            term = np.zeros(x.shape)
            for k in range(len(streams)):
                args = [hesss[i][..., :, j] if i == k else grads[i]
                        for i in range(len(streams))]
                term = term + cross_product(args)
            cols.append(term)
        return np.stack(cols, axis=-1)

    if have_hess:
        def jac(x):
            x = as_points(x, dim)
            u = density_flux(x)
            du = flux_jacobian(x)
            s = sigma.eval(x)[..., None, None]
            gs = sigma.grad(x)
            return du / s - np.einsum("...i,...j->...ij", u, gs) / s ** 2
        exact = True
    else:
        def jac(x):
            x = as_points(x, dim)
            return fd_jacobian(ev, x)
        exact = False

    def div(x):
        x = as_points(x, dim)
        b = ev(x)
        return -np.einsum("...i,...i->...", sigma.grad(x), b) / sigma.eval(x)

    return VectorField(dim, ev, jac, div, exact=exact)


def theta_of(b: VectorField, w1: ScalarField) -> ScalarField:
    """Pointwise speed b . grad(w1) along the straightened first coordinate."""
    if b.dim != w1.dim:
        raise FieldError("dimension mismatch between drift and scalar field")
    dim = b.dim

    def ev(x):
        x = as_points(x, dim)
        return np.einsum("...i,...i->...", b.eval(x), w1.grad(x))

    if b.exact and w1.hess is not None:
        def gr(x):
            x = as_points(x, dim)
            jb = b.jacobian(x)
            return (np.einsum("...ij,...i->...j", jb, w1.grad(x))
                    + np.einsum("...ij,...j->...i", w1.hess(x), b.eval(x)))
        exact = True
    else:
        def gr(x):
            x = as_points(x, dim)
            return fd_gradient(ev, x)
        exact = False

    return ScalarField(dim, ev, gr, exact=exact)


def rectification_residual(system: RectifiedSystem, x: Array) -> Array:
    """jac(W) @ b - theta * e1; zero (to tolerance) for every valid system."""
    x = as_points(x, system.dim)
    jw = system.W.jacobian(x)
    bv = system.b.eval(x)
    res = np.einsum("...ij,...j->...i", jw, bv)
    res[..., 0] -= system.theta.eval(x)
    return res


# ---------------------------------------------------------------------------
# 1D profiles for the twist family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Curve:
    """Scalar function of one variable with exact first/second derivatives."""

    eval: Callable[[Array], Array]
    deriv: Callable[[Array], Array]
    deriv2: Callable[[Array], Array] | None = None


def identity_curve() -> Curve:
    return Curve(lambda t: np.asarray(t, dtype=float) + 0.0,
                 lambda t: np.ones_like(np.asarray(t, dtype=float)),
                 lambda t: np.zeros_like(np.asarray(t, dtype=float)))


def zero_curve() -> Curve:
    return Curve(lambda t: np.zeros_like(np.asarray(t, dtype=float)),
                 lambda t: np.zeros_like(np.asarray(t, dtype=float)),
                 lambda t: np.zeros_like(np.asarray(t, dtype=float)))


def sine_curve(amplitude: float, frequency: float) -> Curve:
    """t -> amplitude * sin(frequency * t)."""
    a, w = float(amplitude), float(frequency)
    return Curve(lambda t: a * np.sin(w * np.asarray(t, dtype=float)),
                 lambda t: a * w * np.cos(w * np.asarray(t, dtype=float)),
                 lambda t: -a * w * w * np.sin(w * np.asarray(t, dtype=float)))


def perturbed_identity_curve(amplitude: float) -> Curve:
    """t -> t + amplitude * sin(t), strictly increasing for |amplitude| < 1."""
    a = float(amplitude)
    if abs(a) >= 1.0:
        raise InvalidFamilyError("perturbed identity needs |amplitude| < 1")
    return Curve(lambda t: np.asarray(t, dtype=float) + a * np.sin(np.asarray(t, dtype=float)),
                 lambda t: 1.0 + a * np.cos(np.asarray(t, dtype=float)),
                 lambda t: -a * np.sin(np.asarray(t, dtype=float)))


# ---------------------------------------------------------------------------
# twist family (2D): W = (a(x1) e^{B}, a(x2) e^{-B}), B = beta(a(x1) a(x2))
# ---------------------------------------------------------------------------

def hyperbolic_twist_family(alpha: Curve, beta: Curve, eps: float,
                            alpha_limit: Curve | None = None,
                            beta_limit: Curve | None = None,
                            label: str = "example31") -> RectifiedSystem:
    """2D family twisting along the hyperbolas a(x1)*a(x2) = const.

    The map W(x) = (a(x1) e^{B}, a(x2) e^{-B}) with B = beta(a(x1) a(x2)) has
    Jacobian determinant a'(x1) a'(x2) regardless of beta: the exponential
    factors cancel, so all the oscillation of beta lands in the drift while
    theta stays beta-free.  Here sigma = 1 and b = rot_perp(grad w2).

    ``alpha_limit``/``beta_limit`` are the eps -> 0 limits of the profiles
    (identity / zero when omitted, which covers the canonical instances).
    """
    if alpha.deriv2 is None or beta.deriv2 is None:
        raise InvalidFamilyError("twist family profiles need exact second derivatives")
    probe = np.linspace(-10.0, 10.0, 2001)
    ap = alpha.deriv(probe)
    if np.any(ap <= 0.0):
        raise InvalidFamilyError(
            f"alpha' must stay positive; found {ap.min():.3g} at t={probe[np.argmin(ap)]:.3g}")
    alpha_limit = alpha_limit or identity_curve()
    beta_limit = beta_limit or zero_curve()

    W = _twist_map(alpha, beta)
    limit_W = _twist_map(alpha_limit, beta_limit)
    b = _twist_drift(alpha, beta)
    theta = _product_of_derivatives(alpha)
    limit_theta = _product_of_derivatives(alpha_limit)

    return RectifiedSystem(
        dim=2, eps=float(eps), W=W, sigma=constant_scalar(2, 1.0), b=b,
        theta=theta, sigma_bounds=(1.0, 1.0), limit_W=limit_W,
        limit_theta=limit_theta, label=label, analytic=True)


def _twist_pieces(alpha: Curve, beta: Curve, x: Array):
    x1, x2 = x[..., 0], x[..., 1]
    a1, a2 = alpha.eval(x1), alpha.eval(x2)
    d1, d2 = alpha.deriv(x1), alpha.deriv(x2)
    p = a1 * a2
    return a1, a2, d1, d2, p, beta.eval(p), beta.deriv(p)


def _twist_map(alpha: Curve, beta: Curve) -> Diffeo:
    def ev(x):
        x = as_points(x, 2)
        a1, a2, _, _, _, bb, _ = _twist_pieces(alpha, beta, x)
        e = np.exp(bb)
        return np.stack([a1 * e, a2 / e], axis=-1)

    def jac(x):
        x = as_points(x, 2)
        a1, a2, d1, d2, p, bb, bp = _twist_pieces(alpha, beta, x)
        e = np.exp(bb)
        row1 = np.stack([d1 * (1.0 + p * bp), d2 * a1 ** 2 * bp], axis=-1) * e[..., None]
        row2 = np.stack([-d1 * a2 ** 2 * bp, d2 * (1.0 - p * bp)], axis=-1) / e[..., None]
        return np.stack([row1, row2], axis=-2)

    return Diffeo(2, ev, jac)


def _twist_drift(alpha: Curve, beta: Curve) -> VectorField:
    def ev(x):
        x = as_points(x, 2)
        a1, a2, d1, d2, p, bb, bp = _twist_pieces(alpha, beta, x)
        em = np.exp(-bb)
        return np.stack([em * d2 * (1.0 - p * bp), em * d1 * a2 ** 2 * bp], axis=-1)

    def jac(x):
        x = as_points(x, 2)
        x1, x2 = x[..., 0], x[..., 1]
        a1, a2, d1, d2, p, bb, bp = _twist_pieces(alpha, beta, x)
        dd1, dd2 = alpha.deriv2(x1), alpha.deriv2(x2)
        bpp = beta.deriv2(p)
        em = np.exp(-bb)
        j11 = em * d1 * d2 * a2 * (-2.0 * bp + p * bp ** 2 - p * bpp)
        j12 = em * (dd2 * (1.0 - p * bp) - d2 ** 2 * a1 * (2.0 * bp - p * bp ** 2 + p * bpp))
        j21 = em * a2 ** 2 * (dd1 * bp + d1 ** 2 * a2 * (bpp - bp ** 2))
        j22 = em * d1 * d2 * a2 * (2.0 * bp + p * (bpp - bp ** 2))
        return np.stack([np.stack([j11, j12], axis=-1),
                         np.stack([j21, j22], axis=-1)], axis=-2)

    def div(x):
        # sigma = 1 and sigma*b is a rotated gradient, hence divergence free
        x = as_points(x, 2)
        return np.zeros(x.shape[:-1])

    return VectorField(2, ev, jac, div, div_bound=0.0)


def _product_of_derivatives(alpha: Curve) -> ScalarField:
    def ev(x):
        x = as_points(x, 2)
        return alpha.deriv(x[..., 0]) * alpha.deriv(x[..., 1])

    def gr(x):
        x = as_points(x, 2)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([alpha.deriv2(x1) * alpha.deriv(x2),
                         alpha.deriv(x1) * alpha.deriv2(x2)], axis=-1)

    return ScalarField(2, ev, gr)


# ---------------------------------------------------------------------------
# periodic cell maps and the rescaled family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodicCellMap:
    """Unit-cell map y -> M y + periodic_part(y) with det of its Jacobian > 0.

    ``hessians`` optionally supplies the exact second derivatives of the
    periodic part, shape ``(..., N, N, N)`` with entry [i, j, k] equal to
    d^2(part_i)/(dy_j dy_k); with it the rescaled drift gets an exact
    Jacobian, without it finite differences take over.
    """

    dim: int
    M: Array
    periodic_part: VectorField | None = None
    hessians: Callable[[Array], Array] | None = None

    def eval(self, y: Array) -> Array:
        y = as_points(y, self.dim)
        out = y @ np.asarray(self.M, dtype=float).T
        if self.periodic_part is not None:
            out = out + self.periodic_part.eval(y)
        return out

    def jacobian(self, y: Array) -> Array:
        y = as_points(y, self.dim)
        M = np.asarray(self.M, dtype=float)
        out = np.broadcast_to(M, y.shape + (self.dim,)).copy()
        if self.periodic_part is not None:
            out = out + self.periodic_part.jacobian(y)
        return out


def identity_cell(dim: int = 2) -> PeriodicCellMap:
    def hess(y):
        y = as_points(y, dim)
        return np.zeros(y.shape + (dim, dim))

    return PeriodicCellMap(dim, np.eye(dim), None, hess)


def sine_cell(M, delta: float, gamma: float) -> PeriodicCellMap:
    """2D cell M y + ((delta/2pi) sin(2pi y2), (gamma/2pi) sin(2pi y1))."""
    M = np.asarray(M, dtype=float)
    d, g = float(delta), float(gamma)

    def ev(y):
        y = as_points(y, 2)
        return np.stack([d / TWO_PI * np.sin(TWO_PI * y[..., 1]),
                         g / TWO_PI * np.sin(TWO_PI * y[..., 0])], axis=-1)

    def jac(y):
        y = as_points(y, 2)
        z = np.zeros(y.shape[:-1])
        return np.stack([np.stack([z, d * np.cos(TWO_PI * y[..., 1])], axis=-1),
                         np.stack([g * np.cos(TWO_PI * y[..., 0]), z], axis=-1)],
                        axis=-2)

    def div(y):
        y = as_points(y, 2)
        return np.zeros(y.shape[:-1])

    part = VectorField(2, ev, jac, div, sup_bound=(abs(d) + abs(g)) / TWO_PI,
                       div_bound=0.0)

    def hess(y):
        y = as_points(y, 2)
        out = np.zeros(y.shape + (2, 2))
        out[..., 0, 1, 1] = -TWO_PI * d * np.sin(TWO_PI * y[..., 1])
        out[..., 1, 0, 0] = -TWO_PI * g * np.sin(TWO_PI * y[..., 0])
        return out

    return PeriodicCellMap(2, M, part, hess)


def deltagamma_cell(delta: float, gamma: float) -> PeriodicCellMap:
    """Cell with streams x1 + (delta/2pi) sin(2pi x2) and x2 + (gamma/2pi) sin(2pi x1)."""
    if abs(delta * gamma) >= 1.0:
        raise InvalidCellError("need |delta*gamma| < 1 so the cell determinant stays positive")
    return sine_cell(np.eye(2), delta, gamma)


def shear_cell(gamma: float) -> PeriodicCellMap:
    """Volume-preserving cell with streams x1 and x2 + (gamma/2pi) sin(2pi x1)."""
    return sine_cell(np.eye(2), 0.0, gamma)


def _cell_grid(dim: int, m: int) -> Array:
    axes = [np.arange(m) / m] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _cell_sigma_grad(cell: PeriodicCellMap, y: Array) -> Array:
    # Jacobi's formula: d_k det(J) = det(J) * tr(J^{-1} dJ/dy_k)
    J = cell.jacobian(y)
    det = np.linalg.det(J)
    H = cell.hessians(y) if cell.hessians is not None else None
    if H is None:
        raise FieldError("cell map has no second derivatives")
    Jinv = np.linalg.inv(J)
    return det[..., None] * np.einsum("...ji,...ijk->...k", Jinv, H)


def periodic_family(cell: PeriodicCellMap, eps: float, sample_m: int = 64,
                    bound_inflation: float = 1.05,
                    label: str = "periodic") -> RectifiedSystem:
    """Rescaled system W(x) = eps * cell(x/eps), drift b(x) = b_cell(x/eps).

    sigma is the cell Jacobian determinant evaluated at x/eps, theta is
    identically one, and the limit map is the affine part x -> M x.  The
    sigma bounds come from a ``sample_m``^N cell scan inflated by
    ``bound_inflation``.
    """
    dim = cell.dim
    eps = float(eps)
    if eps <= 0.0:
        raise FieldError("eps must be positive")
    M = np.asarray(cell.M, dtype=float)

    grid = _cell_grid(dim, sample_m)
    det_grid = np.linalg.det(cell.jacobian(grid))
    if np.any(det_grid <= 0.0):
        bad = grid[int(np.argmin(det_grid))]
        raise InvalidCellError(f"cell determinant is not positive, e.g. at y={bad}")
    lo = float(det_grid.min()) / bound_inflation
    hi = float(det_grid.max()) * bound_inflation

    have_hess = cell.hessians is not None

    def cell_flux(y):
        J = cell.jacobian(y)
        rows = [J[..., k, :] for k in range(1, dim)]
        return rot_perp(rows[0]) if dim == 2 else cross_product(rows)

    if dim == 2:
        # hot path for trajectory integration: one Jacobian build, inline det
        def cell_det(J):
            return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]

        def cell_drift(y):
            J = cell.jacobian(y)
            det = cell_det(J)
            return np.stack([J[..., 1, 1] / det, -J[..., 1, 0] / det], axis=-1)
    else:
        def cell_det(J):
            return np.linalg.det(J)

        def cell_drift(y):
            J = cell.jacobian(y)
            rows = [J[..., k, :] for k in range(1, dim)]
            return cross_product(rows) / np.linalg.det(J)[..., None]

    # -- sigma ------------------------------------------------------------
    def sig_ev(x):
        x = as_points(x, dim)
        return cell_det(cell.jacobian(x / eps))

    if have_hess:
        def sig_gr(x):
            x = as_points(x, dim)
            return _cell_sigma_grad(cell, x / eps) / eps
    else:
        def sig_gr(x):
            x = as_points(x, dim)
            return fd_gradient(sig_ev, x)

    sigma = ScalarField(dim, sig_ev, sig_gr, exact=have_hess)

    # -- drift ------------------------------------------------------------
    def b_ev(x):
        x = as_points(x, dim)
        return cell_drift(x / eps)

    if have_hess:
        def flux_jac(y):
            H = cell.hessians(y)
            if dim == 2:
                h2 = H[..., 1, :, :]
                return np.stack([h2[..., 1, :], -h2[..., 0, :]], axis=-2)
            J = cell.jacobian(y)
            rows = [J[..., k, :] for k in range(1, dim)]
            cols = []
            for j in range(dim):
                term = np.zeros(y.shape)
                for k in range(1, dim):
                    args = [H[..., i, :, j] if i == k else rows[i - 1]
                            for i in range(1, dim)]
                    term = term + cross_product(args)
                cols.append(term)
            return np.stack(cols, axis=-1)

        def b_jac(x):
            x = as_points(x, dim)
            y = x / eps
            u = cell_flux(y)
            du = flux_jac(y)
            s = np.linalg.det(cell.jacobian(y))
            gs = _cell_sigma_grad(cell, y)
            return (du / s[..., None, None]
                    - np.einsum("...i,...j->...ij", u, gs) / s[..., None, None] ** 2) / eps

        def b_div(x):
            x = as_points(x, dim)
            y = x / eps
            s = np.linalg.det(cell.jacobian(y))
            return -np.einsum("...i,...i->...", _cell_sigma_grad(cell, y),
                              cell_drift(y)) / (s * eps)
    else:
        def b_jac(x):
            x = as_points(x, dim)
            return fd_jacobian(b_ev, x)

        def b_div(x):
            x = as_points(x, dim)
            return np.trace(b_jac(x), axis1=-2, axis2=-1)

    b_grid = cell_drift(grid)
    sup_b = float(np.linalg.norm(b_grid, axis=-1).max()) * bound_inflation
    div_b = None
    if have_hess:
        div_grid = -np.einsum("...i,...i->...", _cell_sigma_grad(cell, grid), b_grid) / det_grid
        div_b = float(np.abs(div_grid).max()) * bound_inflation / eps

    b = VectorField(dim, b_ev, b_jac, b_div, sup_bound=sup_b, div_bound=div_b,
                    exact=have_hess)

    # -- the rescaled map ---------------------------------------------------
    def w_ev(x):
        x = as_points(x, dim)
        return eps * cell.eval(x / eps)

    def w_jac(x):
        x = as_points(x, dim)
        return cell.jacobian(x / eps)

    W = Diffeo(dim, w_ev, w_jac)

    return RectifiedSystem(
        dim=dim, eps=eps, W=W, sigma=sigma, b=b,
        theta=constant_scalar(dim, 1.0), sigma_bounds=(lo, hi),
        limit_W=affine_diffeo(M), limit_theta=constant_scalar(dim, 1.0),
        label=label, analytic=have_hess)
