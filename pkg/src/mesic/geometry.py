"""Background metrics, covariance maps, regularized delta kernels.

Conventions used throughout the package:

* An *event* is an array whose last axis has length ``d + 1`` and holds
  ``(t, x_1, ..., x_d)``.
* Metric signature is ``(+, -, ..., -)``; a timelike vector ``v`` has
  ``G(v, v) > 0`` and ``|v| = sqrt(G(v, v))``.
* Jacobians are stored as ``J[..., a, mu] = d eta^a / d x^mu``; the inverse
  Jacobian ``kappa[..., mu, a]`` satisfies ``kappa @ J = 1``.
* Metric derivatives are stored as ``dG[..., s, m, n] = d_s G_mn``.

Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import ConfigError, DomainError, NormalizationError, SingularMapError

__all__ = [
    "Metric", "Minkowski", "StaticDiagonalMetric", "PushforwardMetric",
    "gaussian_well", "CovarianceMap", "IdentityMap", "AffineMap",
    "SinusoidalMap", "UserMap", "InverseMap", "DeltaKernel", "LambdaMeasure",
    "pullback_metric", "delta_composed", "delta_base", "density_transform_check",
]


def _fd_derivative(fn, x, step):
    """Fourth-order central differences of ``fn`` along every event axis."""
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    out = []
    for s in range(dim):
        e = np.zeros(dim)
        e[s] = step
        out.append((-fn(x + 2 * e) + 8 * fn(x + e) - 8 * fn(x - e) + fn(x - 2 * e)) / (12 * step))
    return np.stack(out, axis=-3)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class Metric:
    """Fixed background metric ``G_mn`` on a ``d + 1`` dimensional spacetime."""

    kind = "abstract"

    def __init__(self, d: int):
        if d not in (1, 2, 3):
            raise ConfigError(f"spatial dimension must be 1, 2 or 3, got {d}")
        self.d = d
        self.dim = d + 1

    def components(self, x):
        raise NotImplementedError

    def inverse(self, x):
        return np.linalg.inv(self.components(x))

    def derivs(self, x):
        return _fd_derivative(self.components, x, 1e-4)

    def vol_density(self, x):
        return np.sqrt(np.abs(np.linalg.det(self.components(x))))

    def is_diagonal(self) -> bool:
        return False

    def diagonal(self, x):
        """Diagonal entries ``G_mm`` (meaningful only for diagonal metrics)."""
        return np.diagonal(self.components(x), axis1=-2, axis2=-1)


class Minkowski(Metric):
    kind = "minkowski"

    def __init__(self, d: int):
        super().__init__(d)
        self._eta = np.diag([1.0] + [-1.0] * d)

    def components(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._eta, x.shape[:-1] + self._eta.shape).copy()

    def inverse(self, x):
        return self.components(x)

    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def vol_density(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1])

    def is_diagonal(self):
        return True

    def diagonal(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.diag(self._eta), x.shape).copy()


class StaticDiagonalMetric(Metric):
    """``G = diag(g00(x), -g11(x), ..., -gdd(x))`` with time-independent profiles.

    Parameters
    ----------
    g00, grad_g00 : callable
        Spatial position ``(..., d)`` to ``(...)`` and its gradient ``(..., d)``.
    gss, grad_gss : callable
        Spatial position to the positive magnitudes ``(..., d)`` of the spatial
        diagonal, and their gradients ``(..., d, d)`` indexed ``[i, s]``.
    """

    kind = "static_diagonal"

    def __init__(self, d, g00, gss, grad_g00, grad_gss, name="user"):
        super().__init__(d)
        self._g00, self._gss = g00, gss
        self._grad_g00, self._grad_gss = grad_g00, grad_gss
        self.name = name

    def diagonal(self, x):
        x = np.asarray(x, dtype=float)
        xs = x[..., 1:]
        return np.concatenate([np.asarray(self._g00(xs))[..., None], -np.asarray(self._gss(xs))], axis=-1)

    def components(self, x):
        diag = self.diagonal(x)
        out = np.zeros(diag.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = diag
        return out

    def inverse(self, x):
        diag = self.diagonal(x)
        out = np.zeros(diag.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = 1.0 / diag
        return out

    def vol_density(self, x):
        return np.sqrt(np.abs(np.prod(self.diagonal(x), axis=-1)))

    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        xs = x[..., 1:]
        out = np.zeros(x.shape[:-1] + (self.dim,) * 3)
        g0 = np.asarray(self._grad_g00(xs))
        gs = np.asarray(self._grad_gss(xs))
        for s in range(self.d):
            out[..., s + 1, 0, 0] = g0[..., s]
            for i in range(self.d):
                out[..., s + 1, i + 1, i + 1] = -gs[..., i, s]
        return out

    def is_diagonal(self):
        return True


def gaussian_well(d: int, depth: float, center: Sequence[float], width: float) -> StaticDiagonalMetric:
    """Weak-field metric ``diag(1 + 2U, -(1 - 2U), ...)`` with a Gaussian well ``U``."""
    if not 0.0 <= depth < 0.5:
        raise ConfigError("gaussian_well depth must lie in [0, 0.5)")
    c = np.asarray(center, dtype=float)
    if c.shape != (d,):
        raise ConfigError("gaussian_well center must have d components")

    def U(xs):
        r2 = np.sum((xs - c) ** 2, axis=-1)
        return -depth * np.exp(-r2 / (2 * width ** 2))

    def gradU(xs):
        return -U(xs)[..., None] * (xs - c) / width ** 2

    return StaticDiagonalMetric(
        d,
        g00=lambda xs: 1 + 2 * U(xs),
        gss=lambda xs: np.repeat((1 - 2 * U(xs))[..., None], d, axis=-1),
        grad_g00=lambda xs: 2 * gradU(xs),
        grad_gss=lambda xs: np.repeat(-2 * gradU(xs)[..., None, :], d, axis=-2),
        name="gaussian_well",
    )


class PushforwardMetric(Metric):
    """The metric ``eta_* G`` with components ``G_mn kappa^m_a kappa^n_b``.

    Used for the fiber metric ``g`` felt by the particle and, with a spatial
    diffeomorphism in place of ``eta``, for pushing a background forward.
    """

    kind = "pushforward"

    def __init__(self, G: Metric, eta: "CovarianceMap"):
        super().__init__(G.d)
        self.G, self.eta = G, eta

    def _pieces(self, z):
        x = self.eta.backward(z)
        kappa = self.eta.inv_jacobian(x)
        return x, kappa

    def components(self, z):
        x, kappa = self._pieces(z)
        return np.einsum("...ma,...mn,...nb->...ab", kappa, self.G.components(x), kappa)

    def derivs(self, z):
        if not self.eta.has_hessian:
            return super().derivs(z)
        x, kappa = self._pieces(z)
        Gx = self.G.components(x)
        dG = self.G.derivs(x)
        H = self.eta.hessian(x)
        dkappa = -np.einsum("...mb,...bns,...na->...sma", kappa, H, kappa)
        first = np.einsum("...sma,...mn,...nb->...sab", dkappa, Gx, kappa)
        dgx = first + np.swapaxes(first, -1, -2) + np.einsum("...ma,...smn,...nb->...sab", kappa, dG, kappa)
        return np.einsum("...sc,...sab->...cab", kappa, dgx)

    def is_diagonal(self):
        return self.G.is_diagonal() and self.eta.jacobian_is_diagonal


# ---------------------------------------------------------------------------
# Covariance maps
# ---------------------------------------------------------------------------

class CovarianceMap:
    """Positively oriented diffeomorphism ``eta`` identifying base and fiber."""

    kind = "abstract"
    has_hessian = True
    jacobian_is_diagonal = False
    preserves_slicing = False
    inverse_tol = 1e-12

    def __init__(self, dim: int):
        self.dim = dim

    def forward(self, x):
        raise NotImplementedError

    def backward(self, y):
        return self._fixed_point_inverse(y)

    def jacobian(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def inv_jacobian(self, x):
        J = self.jacobian(x)
        det = np.linalg.det(J)
        if np.any(np.abs(det) < 1e-14):
            raise SingularMapError("covariance map Jacobian is singular")
        return np.linalg.inv(J)

    def det(self, x):
        return np.linalg.det(self.jacobian(x))

    def _fixed_point_inverse(self, y, max_iter=10_000):
        # x <- x + (y - eta(x)) contracts for x + s(x) maps with |grad s| < 1
        y = np.asarray(y, dtype=float)
        x = y.copy()
        for _ in range(max_iter):
            r = y - self.forward(x)
            x = x + r
            if np.max(np.abs(r), initial=0.0) < self.inverse_tol:
                return x
        raise SingularMapError("fixed-point inversion of covariance map did not converge")


class IdentityMap(CovarianceMap):
    kind = "identity"
    jacobian_is_diagonal = True
    preserves_slicing = True

    def forward(self, x):
        return np.array(x, dtype=float)

    def backward(self, y):
        return np.array(y, dtype=float)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()

    inv_jacobian = jacobian

    def det(self, x):
        return np.ones(np.shape(x)[:-1])

    def hessian(self, x):
        return np.zeros(np.shape(x)[:-1] + (self.dim,) * 3)


class AffineMap(CovarianceMap):
    """``eta(x) = A x + b`` with ``det A > 0``."""

    kind = "affine"

    def __init__(self, A, b=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        super().__init__(A.shape[0])
        if A.shape != (self.dim, self.dim):
            raise ConfigError("affine matrix must be square")
        detA = np.linalg.det(A)
        if not detA > 1e-14:
            raise SingularMapError("affine covariance map must have positive determinant")
        self.A = A
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float)
        self._Ainv = np.linalg.inv(A)
        self._det = detA
        off = A - np.diag(np.diag(A))
        self.jacobian_is_diagonal = bool(np.all(off == 0))
        self.preserves_slicing = bool(np.all(A[0, 1:] == 0) and np.all(A[1:, 0] == 0))

    def forward(self, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.b

    def backward(self, y):
        return (np.asarray(y, dtype=float) - self.b) @ self._Ainv.T

    def jacobian(self, x):
        return np.broadcast_to(self.A, np.shape(x)[:-1] + self.A.shape).copy()

    def inv_jacobian(self, x):
        return np.broadcast_to(self._Ainv, np.shape(x)[:-1] + self.A.shape).copy()

    def det(self, x):
        return np.full(np.shape(x)[:-1], self._det)

    def hessian(self, x):
        return np.zeros(np.shape(x)[:-1] + (self.dim,) * 3)


class SinusoidalMap(CovarianceMap):
    """Bounded smooth spatial perturbation ``x_i + a_i sin(k_i x_i + theta_i)``.

    Time is left untouched. ``|a_i k_i| < 1`` keeps the map globally
    invertible; choosing ``k_i`` as a multiple of ``2 pi / L_i`` makes it
    compatible with a periodic box.
    """

    kind = "smooth"
    jacobian_is_diagonal = True
    preserves_slicing = True

    def __init__(self, amplitude, wavenumber, phase=None):
        a = np.atleast_1d(np.asarray(amplitude, dtype=float))
        super().__init__(a.size + 1)
        self.a = a
        self.k = np.broadcast_to(np.asarray(wavenumber, dtype=float), a.shape).copy()
        self.theta = np.zeros_like(a) if phase is None else np.broadcast_to(np.asarray(phase, dtype=float), a.shape).copy()
        if np.any(np.abs(self.a * self.k) >= 1):
            raise SingularMapError("smooth covariance map needs |a k| < 1 on every axis")

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        y = x.copy()
        y[..., 1:] += self.a * np.sin(self.k * x[..., 1:] + self.theta)
        return y

    def _dslope(self, x):
        return 1.0 + self.a * self.k * np.cos(self.k * x[..., 1:] + self.theta)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        diag = np.concatenate([np.ones(x.shape[:-1] + (1,)), self._dslope(x)], axis=-1)
        out = np.zeros(x.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = diag
        return out

    def det(self, x):
        return np.prod(self._dslope(np.asarray(x, dtype=float)), axis=-1)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.dim,) * 3)
        curv = -self.a * self.k ** 2 * np.sin(self.k * x[..., 1:] + self.theta)
        for i in range(self.dim - 1):
            out[..., i + 1, i + 1, i + 1] = curv[..., i]
        return out


class UserMap(CovarianceMap):
    """Covariance map from user callables.

    ``backward`` may be omitted, in which case it is computed by fixed-point
    iteration (valid for maps of the form ``x + s(x)`` with ``|grad s| < 1``).
    Without ``hessian`` the fiber metric derivatives fall back to finite
    differences.
    """

    kind = "smooth"

    def __init__(self, dim, forward, jacobian, backward=None, hessian=None, preserves_slicing=False):
        super().__init__(dim)
        self._forward, self._jacobian = forward, jacobian
        self._backward, self._hessian = backward, hessian
        self.has_hessian = hessian is not None
        self.preserves_slicing = preserves_slicing

    def forward(self, x):
        return np.asarray(self._forward(np.asarray(x, dtype=float)), dtype=float)

    def backward(self, y):
        if self._backward is None:
            return self._fixed_point_inverse(y)
        return np.asarray(self._backward(np.asarray(y, dtype=float)), dtype=float)

    def jacobian(self, x):
        return np.asarray(self._jacobian(np.asarray(x, dtype=float)), dtype=float)

    def hessian(self, x):
        return np.asarray(self._hessian(np.asarray(x, dtype=float)), dtype=float)


class InverseMap(CovarianceMap):
    """The inverse ``psi = m^-1`` of another covariance map."""

    def __init__(self, m: CovarianceMap):
        super().__init__(m.dim)
        self.m = m
        self.kind = m.kind
        self.has_hessian = m.has_hessian
        self.jacobian_is_diagonal = m.jacobian_is_diagonal
        self.preserves_slicing = m.preserves_slicing

    def forward(self, x):
        return self.m.backward(x)

    def backward(self, y):
        return self.m.forward(y)

    def jacobian(self, x):
        return self.m.inv_jacobian(self.m.backward(x))

    def inv_jacobian(self, x):
        return self.m.jacobian(self.m.backward(x))

    def det(self, x):
        return 1.0 / self.m.det(self.m.backward(x))

    def hessian(self, x):
        p = self.m.backward(x)
        D = self.m.inv_jacobian(p)
        return -np.einsum("...ab,...bcs,...cm,...sn->...amn", D, self.m.hessian(p), D, D)


# ---------------------------------------------------------------------------
# Regularized delta kernels
# ---------------------------------------------------------------------------

_GAUSS_CUT = 6.7  # truncation mass erfc(6.7/sqrt 2) ~ 2e-11
_RADIUS = {"bspline_linear": 1.0, "bspline_quadratic": 1.5, "bspline_cubic": 2.0, "gaussian": _GAUSS_CUT}


def _bspline(shape, u):
    a = np.abs(u)
    if shape == "bspline_linear":
        return np.where(a < 1, 1 - a, 0.0)
    if shape == "bspline_quadratic":
        return np.where(a <= 0.5, 0.75 - a * a, np.where(a < 1.5, 0.5 * (1.5 - a) ** 2, 0.0))
    if shape == "bspline_cubic":
        return np.where(a <= 1, 2.0 / 3.0 - a * a + 0.5 * a ** 3,
                        np.where(a < 2, (2 - a) ** 3 / 6.0, 0.0))
    return np.where(a <= _GAUSS_CUT, np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi), 0.0)


def _dbspline(shape, u):
    a = np.abs(u)
    s = np.sign(u)
    if shape == "bspline_linear":
        return np.where(a < 1, -s, 0.0)
    if shape == "bspline_quadratic":
        return np.where(a <= 0.5, -2 * u, np.where(a < 1.5, -s * (1.5 - a), 0.0))
    if shape == "bspline_cubic":
        return np.where(a <= 1, -2 * u + 1.5 * s * a * a, np.where(a < 2, -0.5 * s * (2 - a) ** 2, 0.0))
    return np.where(a <= _GAUSS_CUT, -u * np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi), 0.0)


@dataclass(frozen=True)
class DeltaKernel:
    """Even, unit-mass regularization of the Dirac delta.

    ``width`` is the kernel scale in units of the local grid spacing ``h``:
    the 1D profile is ``B(u) / (width h)`` with ``u = offset / (width h)``.
    For ``bspline_quadratic`` with ``width = 1`` the support spans three
    cells. The Gaussian uses ``sigma = width h`` and is truncated at 6.7 sigma.
    Integer widths keep the B-splines an exact partition of unity on the grid.
    """

    shape: str = "bspline_quadratic"
    width: float = 1.0

    def __post_init__(self):
        if self.shape not in _RADIUS:
            raise ConfigError(f"unknown kernel shape {self.shape!r}")
        if not self.width > 0:
            raise ConfigError("kernel width must be positive")

    @property
    def radius(self) -> float:
        """Support radius in units of ``width * h``."""
        return _RADIUS[self.shape]

    def support_radius(self, spacing):
        return self.radius * self.width * np.asarray(spacing, dtype=float)

    def value(self, offset, spacing):
        scale = self.width * spacing
        return _bspline(self.shape, np.asarray(offset, dtype=float) / scale) / scale

    def derivative(self, offset, spacing):
        scale = self.width * spacing
        return _dbspline(self.shape, np.asarray(offset, dtype=float) / scale) / scale ** 2

    def evaluate(self, offsets, spacings):
        """Tensor-product kernel over the last axis of ``offsets``."""
        offsets = np.asarray(offsets, dtype=float)
        spacings = np.broadcast_to(np.asarray(spacings, dtype=float), offsets.shape[-1:])
        out = np.ones(offsets.shape[:-1])
        for a in range(offsets.shape[-1]):
            out = out * self.value(offsets[..., a], spacings[a])
        return out

    def stencil(self, pos, origin, spacing, n, periodic):
        """Grid indices, weights and position-derivatives along one axis.

        Returns ``(idx, w, dw)`` where ``w[i] = S(x_idx - pos)`` and
        ``dw[i] = d w[i] / d pos``. Indices are wrapped when ``periodic``;
        otherwise any clipped support yields ``None``.
        """
        r = self.radius * self.width * spacing
        u = (pos - origin) / spacing
        lo = int(math.ceil(u - r / spacing - 1e-12))
        hi = int(math.floor(u + r / spacing + 1e-12))
        j = np.arange(lo, hi + 1)
        off = origin + j * spacing - pos
        w = self.value(off, spacing)
        dw = -self.derivative(off, spacing)
        if periodic:
            j = np.mod(j, n)
        elif lo < 0 or hi > n - 1:
            return None
        return j, w, dw


# ---------------------------------------------------------------------------
# Suspension density on the evolution-parameter line
# ---------------------------------------------------------------------------

class LambdaMeasure:
    """Weight-1 density ``sqrt(K(lambda))`` with unit total mass on a window.

    Kinds: ``uniform``, ``triangular`` (peak at ``center``), ``bump`` (smooth,
    compactly supported, ``center`` and ``halfwidth``) and ``tabulated``
    (piecewise linear through ``points``/``values``, taken as given).
    """

    NORM_TOL = 1e-10

    def __init__(self, kind="uniform", domain=(0.0, 1.0), center=None, halfwidth=None,
                 points=None, values=None, validate=True):
        self.kind = kind
        self.lam0, self.lam1 = map(float, domain)
        if not self.lam1 > self.lam0:
            raise ConfigError("lambda window must have positive length")
        span = self.lam1 - self.lam0
        self.center = 0.5 * (self.lam0 + self.lam1) if center is None else float(center)
        self.halfwidth = 0.5 * span if halfwidth is None else float(halfwidth)
        self._norm = 1.0
        if kind == "uniform":
            self._fn = lambda lam: np.full(np.shape(lam), 1.0 / span)
        elif kind == "triangular":
            c, a, b = self.center, self.lam0, self.lam1
            if not a < c < b:
                raise ConfigError("triangular peak must lie inside the window")
            self._fn = lambda lam: np.where(lam <= c, 2 * (lam - a) / (span * (c - a)),
                                            2 * (b - lam) / (span * (b - c))).clip(min=0.0)
        elif kind == "bump":
            c, hw = self.center, self.halfwidth
            if c - hw < self.lam0 - 1e-12 or c + hw > self.lam1 + 1e-12 or hw <= 0:
                raise ConfigError("bump support must lie inside the window")

            def raw(lam):
                s = (np.asarray(lam, dtype=float) - c) / hw
                inside = np.abs(s) < 1
                out = np.zeros(np.shape(s))
                out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
                return out

            mass = integrate.quad(lambda l: float(raw(l)), c - hw, c + hw, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
            self._fn = lambda lam: raw(lam) / mass
        elif kind == "tabulated":
            if points is None or values is None:
                raise ConfigError("tabulated measure needs points and values")
            p = np.asarray(points, dtype=float)
            v = np.asarray(values, dtype=float)
            if p.shape != v.shape or p.ndim != 1 or np.any(np.diff(p) <= 0):
                raise ConfigError("tabulated measure needs increasing points matching values")
            if np.any(v < 0):
                raise ConfigError("suspension density must be non-negative")
            self._fn = lambda lam: np.interp(lam, p, v, left=0.0, right=0.0)
            self._points = p
        else:
            raise ConfigError(f"unknown lambda measure kind {kind!r}")
        if validate:
            self.check()

    def k_density(self, lam):
        return self._fn(np.asarray(lam, dtype=float))

    def total(self) -> float:
        brk = [self.center] if self.kind in ("triangular",) else None
        if self.kind == "tabulated":
            p = self._points
            return float(np.trapezoid(self.k_density(p), p))
        if self.kind == "bump":
            a, b = self.center - self.halfwidth, self.center + self.halfwidth
        else:
            a, b = self.lam0, self.lam1
        return integrate.quad(lambda l: float(self.k_density(l)), a, b, points=brk,
                              epsabs=1e-14, epsrel=1e-13, limit=200)[0]

    def check(self):
        tot = self.total()
        if abs(tot - 1.0) > self.NORM_TOL:
            raise NormalizationError(f"lambda measure integrates to {tot!r}, not 1")
        return tot

    def node_weights(self, nodes, renormalize=False):
        """Trapezoid weights times ``sqrt(K)`` on the given nodes.

        The raw weights carry the quadrature error of the density itself;
        ``renormalize`` rescales them to sum exactly to one.
        """
        nodes = np.asarray(nodes, dtype=float)
        w = trapezoid_weights(nodes) * self.k_density(nodes)
        s = w.sum()
        if not s > 0:
            raise NormalizationError("lambda measure has no mass on the quadrature nodes")
        return w / s if renormalize else w


def trapezoid_weights(nodes):
    nodes = np.asarray(nodes, dtype=float)
    w = np.zeros_like(nodes)
    if nodes.size > 1:
        dl = np.diff(nodes)
        w[:-1] += 0.5 * dl
        w[1:] += 0.5 * dl
    else:
        w[:] = 1.0
    return w


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def pullback_metric(G: Metric, eta: CovarianceMap, z):
    """Fiber metric ``g_ab(z) = G_mn kappa^m_a kappa^n_b`` at ``eta^-1(z)``."""
    if isinstance(eta, IdentityMap):
        return G.components(z)
    return PushforwardMetric(G, eta).components(z)


def delta_composed(kernel: DeltaKernel, eta: CovarianceMap, x, z, scales):
    """Regularized ``delta(eta(x) - z) det(eta_*)(x)``; kernel lives in fiber coordinates."""
    x = np.asarray(x, dtype=float)
    return kernel.evaluate(eta.forward(x) - np.asarray(z, dtype=float), scales) * eta.det(x)


def delta_base(kernel: DeltaKernel, eta: CovarianceMap, x, z, scales):
    """Regularized ``delta(x - eta^-1(z))``; kernel lives in base coordinates.

    Agrees with :func:`delta_composed` as the kernel width shrinks. This is
    the form the solvers deposit and interpolate with, because it makes the
    physical dynamics exactly independent of affine covariance maps.
    """
    x = np.asarray(x, dtype=float)
    return kernel.evaluate(x - eta.backward(np.asarray(z, dtype=float)), scales)


def _quadrature_grid(lower, upper, n):
    axes = []
    for lo, hi in zip(lower, upper):
        h = (hi - lo) / n
        axes.append(lo + (np.arange(n) + 0.5) * h)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vol = float(np.prod([(hi - lo) / n for lo, hi in zip(lower, upper)]))
    return mesh, vol


def density_transform_check(kernel: DeltaKernel, eta: CovarianceMap, f: Callable, z, lower, upper,
                            scales, n: int = 400):
    """``|int f(eta(x)) S(eta(x) - z) |J(x)| dx - f(z)|`` by midpoint quadrature.

    ``lower``/``upper`` bound the base-coordinate quadrature box; the
    pre-image of the kernel support around ``z`` must fit inside it.
    """
    z = np.asarray(z, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    r = kernel.support_radius(np.broadcast_to(np.asarray(scales, dtype=float), z.shape))
    # sample the boundary of the support box and pull it back
    corners = np.stack(np.meshgrid(*[np.linspace(-1, 1, 9)] * z.size, indexing="ij"), axis=-1).reshape(-1, z.size)
    pre = eta.backward(z + corners * r)
    if np.any(pre < lower) or np.any(pre > upper):
        raise DomainError("quadrature box does not cover the kernel support")
    x, vol = _quadrature_grid(lower, upper, n)
    y = eta.forward(x)
    integrand = f(y) * kernel.evaluate(y - z, scales) * np.abs(eta.det(x))
    return float(abs(integrand.sum() * vol - f(z)))
