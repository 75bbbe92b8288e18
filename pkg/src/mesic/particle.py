"""Relativistic particle with field-dependent effective mass ``m + eps*phi``.

The evolved quantity is the effective momentum covector
``pi_a = (m + eps phi) g_ab zdot^b / |zdot|`` whose equation of motion is

    d pi_a / d lambda = eps kappa^mu_a phi_,mu |zdot|
                        + (m + eps phi) d_a g_bc zdot^b zdot^c / (2 |zdot|)

with ``g`` the fiber metric seen through the covariance map. In flat space
and coordinate time this is ``d/dt[(m + eps phi) gamma v] = -eps grad(phi) / gamma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Union

import numpy as np

from .errors import BoundaryError, ConfigError, EscapeError, GaugeError
from .geometry import CovarianceMap, DeltaKernel, IdentityMap, Metric, PushforwardMetric
from .kg_field import FieldState, interpolate_field

GAUGES = ("proper_time", "coordinate_time")
CONSTRAINT_LIMIT = 1e-4

FieldSample = Callable[[np.ndarray], tuple]


@dataclass(frozen=True)
class ParticleState:
    z: np.ndarray
    zdot: np.ndarray
    lam: float
    gauge: str
    m: float
    eps: float
    constraint_drift: float = 0.0  # |(|zdot|) - 1| before the last proper-time renormalization

    def __post_init__(self):
        if self.gauge not in GAUGES:
            raise ConfigError(f"unknown gauge {self.gauge!r}")
        object.__setattr__(self, "z", np.array(self.z, dtype=float))
        object.__setattr__(self, "zdot", np.array(self.zdot, dtype=float))
        if self.z.shape != self.zdot.shape or self.z.ndim != 1:
            raise ConfigError("particle event and velocity must be vectors of equal length")


def fiber_metric(G: Metric, eta: CovarianceMap) -> Metric:
    """The metric the particle sees in fiber coordinates."""
    return G if isinstance(eta, IdentityMap) else PushforwardMetric(G, eta)


def norm(g: np.ndarray, v: np.ndarray) -> float:
    n2 = float(v @ g @ v)
    if not n2 > 0:
        raise GaugeError("velocity is not timelike")
    return math.sqrt(n2)


def unit_from_covector(g: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Future unit vector ``u`` whose lowered spatial part ``(g u)_s`` equals ``q``.

    Solves the mass shell ``w^T g^-1 w = 1`` for the missing time component
    of ``w = g u``; the root with ``u^0 > 0`` is returned.
    """
    H = np.linalg.inv(g)
    b = float(H[0, 1:] @ q)
    c = float(q @ H[1:, 1:] @ q)
    disc = b * b - H[0, 0] * (c - 1.0)
    if not disc > 0:
        raise GaugeError("momentum does not lie on a future mass shell")
    w = np.concatenate([[(-b + math.sqrt(disc)) / H[0, 0]], q])
    return H @ w


def frozen_sampler(s: FieldState, kernel: DeltaKernel) -> FieldSample:
    """Field sampler reading a grid snapshot through the deposition kernel."""

    def sample(X):
        try:
            phi, grad, pi = interpolate_field(s, X[1:], kernel)
        except BoundaryError as exc:
            raise EscapeError(str(exc)) from exc
        return phi, np.concatenate([[pi], grad])

    return sample


def _sampler(field, kernel) -> FieldSample:
    if isinstance(field, FieldState):
        return frozen_sampler(field, kernel)
    if callable(field):
        return lambda X: (float(field(X)[0]), np.asarray(field(X)[1], dtype=float))
    raise ConfigError("field must be a FieldState or a callable")


def _force(z, zdot, A, dphi, eps, gm: Metric, eta: CovarianceMap):
    g = gm.components(z)
    nrm = norm(g, zdot)
    X = eta.backward(z)
    kappa = eta.inv_jacobian(X)
    dg = gm.derivs(z)
    return eps * (kappa.T @ dphi) * nrm + A * np.einsum("amn,m,n->a", dg, zdot, zdot) / (2 * nrm)


def particle_force(p: ParticleState, field_sample, G: Metric, eta: CovarianceMap) -> np.ndarray:
    """Right-hand side of the effective-momentum equation as a fiber covector.

    ``field_sample = (phi, dphi)`` holds the field value and its base-space
    gradient ``(phi_t, phi_x, ...)`` at ``eta^-1(z)``.
    """
    phi, dphi = field_sample
    A = p.m + p.eps * float(phi)
    return _force(p.z, p.zdot, A, np.asarray(dphi, dtype=float), p.eps, fiber_metric(G, eta), eta)


def effective_momentum(p: ParticleState, phi: float, G: Metric, eta: CovarianceMap) -> np.ndarray:
    g = fiber_metric(G, eta).components(p.z)
    return (p.m + p.eps * phi) * (g @ p.zdot) / norm(g, p.zdot)


def reparameterize(p: ParticleState, target_gauge: str, G: Metric, eta: CovarianceMap | None = None) -> ParticleState:
    """Rescale the tangent to ``|zdot| = 1`` (proper time) or ``zdot^0 = 1`` (coordinate time)."""
    if target_gauge not in GAUGES:
        raise ConfigError(f"unknown gauge {target_gauge!r}")
    eta = eta or IdentityMap(p.z.size)
    g = fiber_metric(G, eta).components(p.z)
    nrm = norm(g, p.zdot)
    if target_gauge == "proper_time":
        zdot = p.zdot / nrm
    else:
        if not p.zdot[0] > 0:
            raise GaugeError("velocity has no future time component")
        zdot = p.zdot / p.zdot[0]
    return replace(p, zdot=zdot, gauge=target_gauge)


def step_particle(p: ParticleState, field: Union[FieldState, FieldSample], dt_lambda: float,
                  G: Metric, eta: CovarianceMap | None = None, kernel: DeltaKernel | None = None,
                  iterations: int = 3) -> ParticleState:
    """One drift-kick-drift step of the effective-momentum equation.

    ``field`` is either a grid snapshot (held frozen, read through ``kernel``)
    or a callable ``X -> (phi, dphi)`` in base coordinates. The kick uses the
    force at the half-step position with the velocity averaged between the
    old and the new momentum. The closing drift reads the velocity at the end
point, so both the kick and that drift are refined together by
``iterations`` fixed-point passes.
    """
    eta = eta or IdentityMap(p.z.size)
    kernel = kernel or DeltaKernel()
    sample = _sampler(field, kernel)
    gm = fiber_metric(G, eta)
    h = float(dt_lambda)

    def mass_and_grad(z):
        phi, dphi = sample(eta.backward(z))
        return p.m + p.eps * phi, dphi

    A0, _ = mass_and_grad(p.z)
    g0 = gm.components(p.z)
    nrm0 = norm(g0, p.zdot)

    if p.gauge == "proper_time":
        if abs(nrm0 - 1.0) > CONSTRAINT_LIMIT:
            raise GaugeError(f"proper-time constraint violated: |zdot| = {nrm0}")
        u0 = p.zdot / nrm0
        pi = A0 * (g0 @ u0)
        zh = p.z + 0.5 * h * u0
        Ah, dphih = mass_and_grad(zh)
        gh = gm.components(zh)
        u1 = u0
        z_new = zh + 0.5 * h * u0
        for _ in range(iterations):
            ubar = 0.5 * (u0 + u1)
            ubar = ubar / norm(gh, ubar)
            pi_new = pi + h * _force(zh, ubar, Ah, dphih, p.eps, gm, eta)
            g1 = gm.components(z_new)
            w = np.linalg.solve(g1, pi_new)
            u1 = w / norm(g1, w)
            z_new = zh + 0.5 * h * u1
        A1, _ = mass_and_grad(z_new)
        g1 = gm.components(z_new)
        zdot = np.linalg.solve(g1, pi_new) / A1
        drift = abs(norm(g1, zdot) - 1.0)
        if drift > CONSTRAINT_LIMIT:
            raise GaugeError(f"proper-time constraint drifted by {drift}")
        return replace(p, z=z_new, zdot=zdot / norm(g1, zdot), lam=p.lam + h, constraint_drift=drift)

    if not p.zdot[0] > 0:
        raise GaugeError("coordinate-time gauge needs a future-directed tangent")
    u0 = p.zdot / nrm0
    q = A0 * (g0 @ u0)[1:]

    def coord_velocity(z, A, gz, qs):
        u = unit_from_covector(gz, qs / A)
        return u / u[0]

    v0 = p.zdot / p.zdot[0]
    zh = p.z + 0.5 * h * v0
    Ah, dphih = mass_and_grad(zh)
    v1 = v0
    z_new = zh + 0.5 * h * v0
    for _ in range(iterations):
        vbar = 0.5 * (v0 + v1)
        q_new = q + h * _force(zh, vbar, Ah, dphih, p.eps, gm, eta)[1:]
        A1, _ = mass_and_grad(z_new)
        v1 = coord_velocity(z_new, A1, gm.components(z_new), q_new)
        z_new = zh + 0.5 * h * v1
    A1, _ = mass_and_grad(z_new)
    zdot = coord_velocity(z_new, A1, gm.components(z_new), q_new)
    return replace(p, z=z_new, zdot=zdot, lam=p.lam + h)


# ---------------------------------------------------------------------------
# Interval quantities of the discrete worldline action
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    """Straight fiber segment between two worldline nodes."""

    length: float
    momentum: np.ndarray
    metric_force: np.ndarray
    metric: np.ndarray
    delta: np.ndarray


def interval(gm: Metric, z0, z1, A: float) -> Interval:
    """Midpoint length ``sqrt(g(zbar)(dz, dz))`` and its momentum and metric-gradient pieces.

    ``momentum = A g dz / length`` and ``metric_force = A d g(dz, dz) / (4 length)``
    are the two derivatives of ``-A * length`` with respect to an endpoint.
    """
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    zb = 0.5 * (z0 + z1)
    dz = z1 - z0
    g = gm.components(zb)
    ell = norm(g, dz)
    dg = gm.derivs(zb)
    force = A * np.einsum("amn,m,n->a", dg, dz, dz) / (4 * ell)
    return Interval(ell, A * (g @ dz) / ell, force, g, dz)
