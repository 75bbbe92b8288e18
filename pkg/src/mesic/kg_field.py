"""Klein-Gordon field on a spatial grid: leapfrog stepping, deposition, gathering.

The field obeys

    G^00 phi_tt - (1/sqrt|G|) d_i(sqrt|G| |G^ii| d_i phi) + M^2 phi = -rho

which is the stationarity condition of the discrete action assembled in
:mod:`mesic.lagrangian` (signature ``(+,-,...,-)``). Grid nodes sit at
``origin + j h`` along every axis. ``FieldState.pi`` holds the time
derivative at the half step ``t - dt/2`` (leapfrog staggering).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (BoundaryError, ConfigError, DivergenceError, EscapeError,
                     GaugeError, StabilityError)
from .geometry import CovarianceMap, DeltaKernel, Metric

BOUNDARIES = ("periodic", "reflecting", "sponge")


@dataclass(frozen=True)
class GridSpec:
    d: int
    extents: tuple
    n: tuple
    boundary: str = "periodic"
    origin: Optional[tuple] = None
    sponge_width: float = 0.0
    sponge_damping: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(e) for e in np.atleast_1d(self.extents)))
        object.__setattr__(self, "n", tuple(int(k) for k in np.atleast_1d(self.n)))
        if self.origin is None:
            object.__setattr__(self, "origin", (0.0,) * self.d)
        else:
            object.__setattr__(self, "origin", tuple(float(o) for o in np.atleast_1d(self.origin)))
        if self.d not in (1, 2, 3):
            raise ConfigError("grid dimension must be 1, 2 or 3")
        if not (len(self.extents) == len(self.n) == len(self.origin) == self.d):
            raise ConfigError("grid extents, n and origin need d entries each")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"unknown boundary {self.boundary!r}")
        if min(self.n) < 4 or min(self.extents) <= 0:
            raise ConfigError("grid needs at least 4 cells and positive extents per axis")

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.extents) / np.array(self.n)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def shape(self) -> tuple:
        return self.n

    def axes(self):
        return [o + np.arange(k) * h for o, k, h in zip(self.origin, self.n, self.spacing)]

    def coords(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def events(self, t: float) -> np.ndarray:
        xs = self.coords()
        return np.concatenate([np.full(xs.shape[:-1] + (1,), float(t)), xs], axis=-1)

    def check_kernel(self, kernel: DeltaKernel):
        if self.boundary == "sponge":
            if np.any(self.sponge_width < kernel.support_radius(self.spacing)):
                raise ConfigError("sponge width must cover the kernel support")


@dataclass
class FieldState:
    """Field values at ``t`` and time derivative ``pi`` at ``t - dt/2``."""

    phi: np.ndarray
    pi: np.ndarray
    t: float
    grid: GridSpec = field(repr=False)

    def __post_init__(self):
        if self.phi.shape != self.grid.shape or self.pi.shape != self.grid.shape:
            raise ConfigError("field arrays do not conform to the grid")

    @classmethod
    def zeros(cls, grid: GridSpec, t: float = 0.0):
        return cls(np.zeros(grid.shape), np.zeros(grid.shape), t, grid)

    def copy(self):
        return FieldState(self.phi.copy(), self.pi.copy(), self.t, self.grid)


@dataclass
class SourceGrid:
    """Source density ``rho`` per unit proper volume."""

    rho: np.ndarray
    t: float


class KGOperator:
    """Grid coefficients of the Klein-Gordon stencil for a diagonal static metric."""

    def __init__(self, grid: GridSpec, G: Metric, M: float):
        if not G.is_diagonal():
            raise ConfigError("field solver supports diagonal background metrics only")
        if G.d != grid.d:
            raise ConfigError("metric and grid dimensions differ")
        self.grid, self.G, self.M = grid, G, float(M)
        ev = grid.events(0.0)
        diag = G.diagonal(ev)
        if np.any(diag[..., 0] <= 0) or np.any(diag[..., 1:] >= 0):
            raise ConfigError("metric signature must be (+,-,...,-) on the grid")
        self.vol = G.vol_density(ev)
        self.a = self.vol / diag[..., 0]
        self.c = [self.vol / np.abs(diag[..., i + 1]) for i in range(grid.d)]
        self.c_face = [0.5 * (c + np.roll(c, -1, axis=i)) for i, c in enumerate(self.c)]
        self.mu = self.M ** 2 * self.vol
        self.h = grid.spacing
        self.damping = self._sponge_profile() if grid.boundary == "sponge" else None

    def _sponge_profile(self):
        g = self.grid
        sigma = np.zeros(g.shape)
        for i, x in enumerate(g.axes()):
            lo, hi = g.origin[i], g.origin[i] + (g.n[i] - 1) * g.spacing[i]
            depth = np.maximum(lo + g.sponge_width - x, 0) + np.maximum(x - (hi - g.sponge_width), 0)
            prof = g.sponge_damping * (depth / g.sponge_width) ** 2
            shape = [1] * g.d
            shape[i] = -1
            sigma = sigma + prof.reshape(shape)
        return sigma

    def forward_diff(self, phi, axis):
        if self.grid.periodic:
            return np.roll(phi, -1, axis=axis) - phi
        out = np.zeros_like(phi)
        sl = [slice(None)] * phi.ndim
        sl[axis] = slice(0, -1)
        out[tuple(sl)] = np.diff(phi, axis=axis)
        return out

    def backward_diff(self, phi, axis):
        fwd = self.forward_diff(phi, axis)
        if self.grid.periodic:
            return np.roll(fwd, 1, axis=axis)
        out = np.zeros_like(fwd)
        dst = [slice(None)] * phi.ndim
        src = [slice(None)] * phi.ndim
        dst[axis] = slice(1, None)
        src[axis] = slice(0, -1)
        out[tuple(dst)] = fwd[tuple(src)]
        return out

    def divergence_term(self, phi):
        """``sum_i D^-(c~ D^+ phi) / h^2``, the discrete ``d_i(sqrt|G| |G^ii| d_i phi)``."""
        out = np.zeros_like(phi)
        for i in range(self.grid.d):
            flux = self.c_face[i] * self.forward_diff(phi, i)
            back = np.roll(flux, 1, axis=i)
            if not self.grid.periodic:
                sl = [slice(None)] * phi.ndim
                sl[i] = 0
                back[tuple(sl)] = 0.0
            out += (flux - back) / self.h[i] ** 2
        return out

    def accel(self, phi, src=None):
        """``phi_tt`` given coordinate-density source ``src = sqrt|G| rho``."""
        rhs = self.divergence_term(phi) - self.mu * phi
        if src is not None:
            rhs = rhs - src
        return rhs / self.a

    def max_speed(self) -> float:
        return float(max(np.sqrt(np.max(c / self.a)) for c in self.c))

    def max_stable_dt(self, cfl: float = 0.9) -> float:
        return cfl * float(np.min(self.h)) / (math.sqrt(self.grid.d) * self.max_speed())

    def pair_energy(self, phi_a, phi_b, pi):
        """Cell-summed ``1/2 a pi^2 + 1/2 phi_a K phi_b`` (the leapfrog invariant)."""
        e = 0.5 * self.a * pi * pi + 0.5 * self.mu * phi_a * phi_b
        for i in range(self.grid.d):
            e = e + 0.5 * self.c_face[i] * self.forward_diff(phi_a, i) * self.forward_diff(phi_b, i) / self.h[i] ** 2
        return float(e.sum() * self.grid.cell_volume)


# ---------------------------------------------------------------------------
# Kernel stencils on the grid
# ---------------------------------------------------------------------------

def kernel_stencil(grid: GridSpec, kernel: DeltaKernel, X):
    """Tensor-product kernel weights around spatial point ``X``.

    Returns ``(ix, W, dW)``: an open-mesh index tuple, the weights
    ``S(x_j - X)`` and their gradients with respect to ``X`` (one array per
    axis), or ``None`` when a non-periodic boundary clips the support.
    """
    X = np.asarray(X, dtype=float)
    parts = []
    for i in range(grid.d):
        st = kernel.stencil(X[i], grid.origin[i], grid.spacing[i], grid.n[i], grid.periodic)
        if st is None:
            return None
        parts.append(st)
    idx = [p[0] for p in parts]
    W = np.ones([len(i) for i in idx])
    dW = []
    for i in range(grid.d):
        shape = [1] * grid.d
        shape[i] = -1
        W = W * parts[i][1].reshape(shape)
    for i in range(grid.d):
        g = np.ones([len(j) for j in idx])
        for k in range(grid.d):
            shape = [1] * grid.d
            shape[k] = -1
            g = g * (parts[k][2] if k == i else parts[k][1]).reshape(shape)
        dW.append(g)
    return np.ix_(*idx), W, dW


def gather(grid: GridSpec, kernel: DeltaKernel, arr, X, error=BoundaryError):
    """Kernel-weighted value and spatial gradient of grid array ``arr`` at ``X``."""
    st = kernel_stencil(grid, kernel, X)
    if st is None:
        raise error("kernel support clipped by the grid boundary")
    ix, W, dW = st
    vals = arr[ix]
    vol = grid.cell_volume
    return float((vals * W).sum() * vol), np.array([(vals * g).sum() * vol for g in dW])


def scatter(grid: GridSpec, kernel: DeltaKernel, X, amount, out=None):
    """Add ``amount * S(x_j - X)`` to ``out`` (density per coordinate volume)."""
    st = kernel_stencil(grid, kernel, X)
    if st is None:
        raise EscapeError("particle kernel left the grid")
    ix, W, _ = st
    if out is None:
        out = np.zeros(grid.shape)
    np.add.at(out, ix, amount * W)
    return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def worldline_collapse(u, Gx):
    """Return ``(|u|, 1/|u^0|)`` for a physical worldline tangent ``u``.

    Collapsing ``int ... delta^(d+1)(x - X(lambda)) dlambda`` at fixed
    coordinate time leaves ``delta^d`` times ``1 / |dt/dlambda|``. Shared by
    the source deposition and the Minkowski tensor.
    """
    u = np.asarray(u, dtype=float)
    nrm2 = float(u @ Gx @ u)
    if not nrm2 > 0:
        raise GaugeError("worldline tangent is not timelike")
    if u[0] == 0:
        raise GaugeError("worldline tangent has no time component")
    return math.sqrt(nrm2), 1.0 / abs(u[0])


def physical_tangent(p, eta: CovarianceMap):
    """Base-space event and tangent ``(X, kappa zdot)`` of a particle state."""
    X = eta.backward(p.z)
    return X, eta.inv_jacobian(X) @ p.zdot


def deposit_source(p, eta: CovarianceMap, kernel: DeltaKernel, grid: GridSpec, G: Metric) -> SourceGrid:
    """Source density of a particle state at its current coordinate time."""
    X, u = physical_tangent(p, eta)
    nrm, collapse = worldline_collapse(u, G.components(X))
    rho = np.zeros(grid.shape)
    if p.eps != 0:
        rho = scatter(grid, kernel, X[1:], p.eps * nrm * collapse, rho)
        rho = rho / G.vol_density(grid.events(X[0]))
    return SourceGrid(rho, float(X[0]))


def step_field(s: FieldState, src: Optional[SourceGrid], dt: float, G: Metric, M: float,
               op: Optional[KGOperator] = None, cfl_max: float = 0.9) -> FieldState:
    """One leapfrog step ``pi += dt * phi_tt; phi += dt * pi``."""
    if op is None:
        op = KGOperator(s.grid, G, M)
    if dt > op.max_stable_dt(cfl_max) * (1 + 1e-12):
        raise StabilityError(f"dt={dt} exceeds the stability bound {op.max_stable_dt(cfl_max)}")
    source = None if src is None else op.vol * src.rho
    pi = s.pi + dt * op.accel(s.phi, source)
    if op.damping is not None:
        pi = pi * np.exp(-op.damping * dt)
    phi = s.phi + dt * pi
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(pi))):
        raise DivergenceError(f"non-finite field at t={s.t + dt}")
    return FieldState(phi, pi, s.t + dt, s.grid)


def interpolate_field(s: FieldState, x: Sequence[float], kernel: DeltaKernel):
    """Kernel-weighted ``(phi, grad phi, pi)`` at spatial point ``x``.

    The gradient comes from the analytically differentiated kernel weights.
    ``pi`` is interpolated as stored, i.e. at the half step.
    """
    phi, grad = gather(s.grid, kernel, s.phi, x)
    pi, _ = gather(s.grid, kernel, s.pi, x)
    return phi, grad, pi


def field_energy(s: FieldState, G: Metric, M: float, dt: Optional[float] = None,
                 op: Optional[KGOperator] = None) -> float:
    """Cell-summed field energy.

    With ``dt`` the previous level ``phi - dt pi`` is reconstructed and the
    leapfrog invariant ``1/2 |pi|^2 + 1/2 <phi_prev, K phi>`` is returned; it
    is conserved to round-off by source-free stepping. Without ``dt`` the
    plain ``1/2 (|pi|^2 + <phi, K phi>)`` is used.
    """
    if op is None:
        op = KGOperator(s.grid, G, M)
    prev = s.phi if dt is None else s.phi - dt * s.pi
    return op.pair_energy(prev, s.phi, s.pi)
