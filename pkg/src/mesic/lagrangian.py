"""Concatenated action of the field-particle system and its variational oracle.

The discrete action is a quadrature over grid cells, time nodes and worldline
nodes of three density pieces:

* the free Klein-Gordon density, suspended over the worldline parameter by
  the weight ``sqrt(K(lambda))`` (split into kinetic, gradient and mass parts),
* the interaction ``-eps phi |zdot|`` and
* the free particle ``-m |zdot|``,

the last two localized on the worldline by the regularized delta. Time
derivatives at a node are the root mean square of the two one-sided
differences and spatial derivatives likewise, so that the stationarity
conditions of this sum are exactly the leapfrog field update and the
interval-momentum particle update used by :mod:`mesic.simulate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AlignmentError, ConfigError, GaugeError, NodeIndexError
from .geometry import (CovarianceMap, DeltaKernel, IdentityMap, LambdaMeasure, Metric,
                       delta_composed, pullback_metric, trapezoid_weights)
from .kg_field import GridSpec, KGOperator, gather
from .particle import fiber_metric, interval

PIECES = ("kinetic", "gradient", "mass", "interaction", "free_particle")


# ---------------------------------------------------------------------------
# Pointwise densities
# ---------------------------------------------------------------------------

def eval_kg_density(phi, grad_phi, x, lam, G: Metric, K: Optional[LambdaMeasure], M: float):
    """``1/2 (G^mn phi_m phi_n - M^2 phi^2) sqrt|G| sqrt(K(lam))`` at events ``x``."""
    phi = np.asarray(phi, dtype=float)
    grad_phi = np.asarray(grad_phi, dtype=float)
    Ginv = G.inverse(x)
    quad = np.einsum("...m,...mn,...n->...", grad_phi, Ginv, grad_phi)
    k = 1.0 if K is None else K.k_density(lam)
    return 0.5 * (quad - M * M * phi * phi) * G.vol_density(x) * k


def eval_particle_density(x, z, zdot, phi_at, G: Metric, eta: CovarianceMap, kernel: DeltaKernel,
                          scales, m: float, eps: float, time_kernel: Optional[DeltaKernel] = None):
    """``-(m + eps phi) |zdot| delta(eta(x) - z) det(eta_*)`` at events ``x``.

    ``scales`` holds the ``d + 1`` kernel length scales. ``time_kernel``
    replaces the kernel along the time axis (the spatial kernel by default).
    """
    z = np.asarray(z, dtype=float)
    zdot = np.asarray(zdot, dtype=float)
    g = pullback_metric(G, eta, z)
    n2 = float(zdot @ g @ zdot)
    if not n2 > 0:
        raise GaugeError("particle velocity is not timelike")
    x = np.asarray(x, dtype=float)
    scales = np.asarray(scales, dtype=float)
    if time_kernel is None:
        delta = delta_composed(kernel, eta, x, z, scales)
    else:
        y = eta.forward(x) - z
        delta = (time_kernel.value(y[..., 0], scales[0])
                 * kernel.evaluate(y[..., 1:], scales[1:]) * eta.det(x))
    return -(m + eps * np.asarray(phi_at, dtype=float)) * math.sqrt(n2) * delta


# ---------------------------------------------------------------------------
# Histories and setup
# ---------------------------------------------------------------------------

@dataclass
class FieldHistory:
    """Field values ``phi[n]`` on the grid at times ``times[n]``."""

    grid: GridSpec
    times: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != (self.times.size,) + self.grid.shape:
            raise ConfigError("field history does not match its grid and time nodes")
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0):
            raise ConfigError("field history needs at least two increasing time nodes")

    def slab(self, lo, hi):
        return FieldHistory(self.grid, self.times[lo:hi + 1], self.phi[lo:hi + 1])

    def replace_phi(self, phi):
        return FieldHistory(self.grid, self.times, phi)


@dataclass
class ParticleHistory:
    """Worldline nodes ``z[k]`` (fiber coordinates) at parameters ``lam[k]``."""

    lam: np.ndarray
    z: np.ndarray
    m: float
    eps: float

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.z.ndim != 2 or self.z.shape[0] != self.lam.size:
            raise ConfigError("particle history needs one event per parameter node")
        if self.lam.size < 2 or np.any(np.diff(self.lam) <= 0):
            raise ConfigError("particle history needs at least two increasing nodes")

    def slab(self, lo, hi):
        return ParticleHistory(self.lam[lo:hi + 1], self.z[lo:hi + 1], self.m, self.eps)

    def replace_z(self, z):
        return ParticleHistory(self.lam, z, self.m, self.eps)


@dataclass
class ActionSetup:
    G: Metric
    M: float
    kernel: DeltaKernel
    eta: CovarianceMap = None
    measure: Optional[LambdaMeasure] = None

    def __post_init__(self):
        if self.eta is None:
            self.eta = IdentityMap(self.G.dim)


@dataclass
class ActionTerms:
    """Per-node contributions of every density piece (already quadrature-weighted)."""

    kinetic: np.ndarray
    gradient: np.ndarray
    mass: np.ndarray
    interaction: np.ndarray
    free_particle: np.ndarray
    suspension: float = 1.0
    extras: dict = field(default_factory=dict)

    @property
    def kg_free(self) -> float:
        return self.suspension * float(self.kinetic.sum() + self.gradient.sum() + self.mass.sum())

    @property
    def value(self) -> float:
        return self.kg_free + float(self.interaction.sum() + self.free_particle.sum())

    def breakdown(self) -> dict:
        out = {name: float(getattr(self, name).sum()) for name in PIECES}
        out["kg_free"] = self.kg_free
        out["suspension"] = self.suspension
        out["total"] = self.value
        return out


# ---------------------------------------------------------------------------
# Discrete action
# ---------------------------------------------------------------------------

def _time_jets(phi, times):
    """Squared node time derivatives: mean of the squared one-sided differences."""
    d = np.diff(phi, axis=0) / np.diff(times).reshape((-1,) + (1,) * (phi.ndim - 1))
    sq = d * d
    out = np.empty_like(phi)
    out[0] = sq[0]
    out[-1] = sq[-1]
    out[1:-1] = 0.5 * (sq[:-1] + sq[1:])
    return out


def _space_jets(op: KGOperator, phi, axis):
    """Squared node derivative along ``axis`` (axis counted on a single snapshot)."""
    ax = axis + 1
    fwd = _shift_diff(op, phi, ax, +1)
    bwd = _shift_diff(op, phi, ax, -1)
    return 0.5 * (fwd * fwd + bwd * bwd) / op.h[axis] ** 2


def _shift_diff(op: KGOperator, phi, ax, sign):
    if op.grid.periodic:
        return (np.roll(phi, -1, axis=ax) - phi) if sign > 0 else (phi - np.roll(phi, 1, axis=ax))
    out = np.zeros_like(phi)
    d = np.diff(phi, axis=ax)
    sl = [slice(None)] * phi.ndim
    sl[ax] = slice(0, -1) if sign > 0 else slice(1, None)
    out[tuple(sl)] = d
    return out


def kg_terms(fh: FieldHistory, G: Metric, M: float, op: Optional[KGOperator] = None):
    """Quadrature-weighted kinetic, gradient and mass arrays of shape ``(nodes,) + grid``."""
    op = op or KGOperator(fh.grid, G, M)
    w = trapezoid_weights(fh.times).reshape((-1,) + (1,) * fh.grid.d) * fh.grid.cell_volume
    kinetic = 0.5 * op.a * _time_jets(fh.phi, fh.times) * w
    grad = np.zeros_like(fh.phi)
    for i in range(fh.grid.d):
        grad = grad + op.c[i] * _space_jets(op, fh.phi, i)
    gradient = -0.5 * grad * w
    mass = -0.5 * op.mu * fh.phi * fh.phi * w
    return kinetic, gradient, mass


def _field_at_events(fh: FieldHistory, kernel: DeltaKernel, X):
    """Kernel-gathered field value and spatial gradient at base event ``X``.

    Time is handled by linear interpolation between the bracketing nodes.
    """
    t = float(X[0])
    times = fh.times
    tol = 1e-9 * (times[-1] - times[0])
    if t < times[0] - tol or t > times[-1] + tol:
        raise AlignmentError(f"particle time {t} outside the field window")
    n = int(np.clip(np.searchsorted(times, t) - 1, 0, times.size - 2))
    s = (t - times[n]) / (times[n + 1] - times[n])
    if abs(s) < 1e-12:
        s = 0.0
    elif abs(s - 1) < 1e-12:
        s = 1.0
    val = 0.0
    grad = np.zeros(fh.grid.d)
    for idx, wt in ((n, 1 - s), (n + 1, s)):
        if wt != 0.0:
            v, g = gather(fh.grid, kernel, fh.phi[idx], X[1:])
            val += wt * v
            grad += wt * g
    return val, grad


def node_speeds(ph: ParticleHistory, gm: Metric):
    """Interval lengths and node speeds ``(l_- + l_+) / (dlam_- + dlam_+)``."""
    ells = np.array([interval(gm, ph.z[k], ph.z[k + 1], 1.0).length for k in range(ph.lam.size - 1)])
    dl = np.diff(ph.lam)
    num = np.zeros(ph.lam.size)
    den = np.zeros(ph.lam.size)
    num[:-1] += ells
    num[1:] += ells
    den[:-1] += dl
    den[1:] += dl
    return ells, num / den


def node_tangents(ph: ParticleHistory, gm: Metric):
    """Node tangents: centered difference directions rescaled to the node speeds."""
    _, speeds = node_speeds(ph, gm)
    z, lam = ph.z, ph.lam
    tang = np.empty_like(z)
    tang[0] = (z[1] - z[0]) / (lam[1] - lam[0])
    tang[-1] = (z[-1] - z[-2]) / (lam[-1] - lam[-2])
    tang[1:-1] = (z[2:] - z[:-2]) / (lam[2:] - lam[:-2])[:, None]
    for k in range(z.shape[0]):
        g = gm.components(z[k])
        n2 = float(tang[k] @ g @ tang[k])
        if not n2 > 0:
            raise GaugeError("worldline tangent is not timelike")
        tang[k] *= speeds[k] / math.sqrt(n2)
    return tang


def particle_terms(fh: FieldHistory, ph: ParticleHistory, setup: ActionSetup, check_alignment=True):
    gm = fiber_metric(setup.G, setup.eta)
    X = setup.eta.backward(ph.z)
    if check_alignment:
        span = fh.times[-1] - fh.times[0]
        if abs(X[0, 0] - fh.times[0]) > 1e-9 * span or abs(X[-1, 0] - fh.times[-1]) > 1e-9 * span:
            raise AlignmentError("field and particle histories cover different time windows")
    _, speeds = node_speeds(ph, gm)
    W = trapezoid_weights(ph.lam)
    phis = np.zeros(ph.lam.size)
    if ph.eps != 0:
        phis = np.array([_field_at_events(fh, setup.kernel, X[k])[0] for k in range(ph.lam.size)])
    interaction = -W * ph.eps * phis * speeds
    free = -W * ph.m * speeds
    return interaction, free, phis


def _suspension(setup: ActionSetup, ph: Optional[ParticleHistory], fh: FieldHistory) -> float:
    if setup.measure is None:
        return 1.0
    setup.measure.check()
    nodes = ph.lam if ph is not None else fh.times
    return float(setup.measure.node_weights(nodes).sum())


def action_terms(fh: FieldHistory, ph: Optional[ParticleHistory], setup: ActionSetup,
                 check_alignment=True, op: Optional[KGOperator] = None) -> ActionTerms:
    kinetic, gradient, mass = kg_terms(fh, setup.G, setup.M, op)
    if ph is None:
        inter = free = np.zeros(0)
        extras = {}
    else:
        inter, free, phis = particle_terms(fh, ph, setup, check_alignment)
        extras = {"phi_at_particle": phis}
    return ActionTerms(kinetic, gradient, mass, inter, free, _suspension(setup, ph, fh), extras)


def action(fh: FieldHistory, ph: Optional[ParticleHistory], setup: ActionSetup) -> ActionTerms:
    """Discrete concatenated action; ``.value`` is the scalar, ``.breakdown()`` the pieces.

    The interaction and free-particle pieces are evaluated only on the cells
    inside the kernel support around each worldline node.
    """
    return action_terms(fh, ph, setup)


def meson_action_terms(fh: FieldHistory, ph: ParticleHistory, setup: ActionSetup) -> dict:
    """The three terms of the uncoupled-form action, each by its own quadrature.

    ``kg`` is integrated over space-time only, the particle terms over the
    worldline parameter only; no suspension density enters.
    """
    kinetic, gradient, mass = kg_terms(fh, setup.G, setup.M)
    inter, free, _ = particle_terms(fh, ph, setup)
    return {"kg": float(kinetic.sum() + gradient.sum() + mass.sum()),
            "interaction": float(inter.sum()), "free_particle": float(free.sum())}


def action_dense_5d(fh: FieldHistory, ph: ParticleHistory, setup: ActionSetup) -> float:
    """Brute-force quadrature of the full density over cells x time nodes x worldline nodes.

    Every term is evaluated pointwise through :func:`eval_kg_density` and
    :func:`eval_particle_density`. Along time the worldline is localized by a
    linear hat of one time step, normalized on the discrete time quadrature
    (this restores full weight to the clipped hat at the window ends).
    """
    grid = fh.grid
    d = grid.d
    op = KGOperator(grid, setup.G, setup.M)
    nodes = fh.times.size
    events = np.broadcast_to(grid.events(0.0), (nodes,) + grid.shape + (d + 1,)).copy()
    events[..., 0] = fh.times.reshape((-1,) + (1,) * d)
    jets = np.zeros(fh.phi.shape + (d + 1,))
    jets[..., 0] = np.sqrt(_time_jets(fh.phi, fh.times))
    for i in range(d):
        jets[..., i + 1] = np.sqrt(_space_jets(op, fh.phi, i))
    wt = trapezoid_weights(fh.times).reshape((-1,) + (1,) * d) * grid.cell_volume
    lam_w = trapezoid_weights(ph.lam)
    measure = setup.measure
    if measure is not None:
        measure.check()
    gm = fiber_metric(setup.G, setup.eta)
    tangents = node_tangents(ph, gm)
    dt = float(np.mean(np.diff(fh.times)))
    hat = DeltaKernel("bspline_linear", 1.0)
    scales = np.concatenate([[dt], grid.spacing])
    total = 0.0
    for k in range(ph.lam.size):
        kg = eval_kg_density(fh.phi, jets, events, ph.lam[k], setup.G, measure, setup.M)
        part = eval_particle_density(events, ph.z[k], tangents[k], fh.phi, setup.G, setup.eta,
                                     setup.kernel, scales, ph.m, ph.eps, time_kernel=hat)
        tmass = float(np.sum(trapezoid_weights(fh.times) * hat.value(
            fh.times - setup.eta.backward(ph.z[k])[0], dt)))
        total += lam_w[k] * float(np.sum(kg * wt)) + lam_w[k] * float(np.sum(part * wt)) / tmass
    return total


def suspension_equivalence(value: float, D1: LambdaMeasure, D2: LambdaMeasure, nodes) -> float:
    """``|value * Q1 - value * Q2|`` for a parameter-independent integrated term.

    ``Q`` is the discrete integral of the suspension density on ``nodes``.
    """
    D1.check()
    D2.check()
    nodes = np.asarray(nodes, dtype=float)
    return abs(value * float(D1.node_weights(nodes).sum()) - value * float(D2.node_weights(nodes).sum()))


# ---------------------------------------------------------------------------
# Variational oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Residual:
    direction: str
    index: tuple
    derivative: float
    scale: float

    @property
    def relative(self) -> float:
        if self.scale == 0:
            return 0.0 if self.derivative == 0 else math.inf
        return abs(self.derivative) / self.scale


def _piece_derivatives(plus: ActionTerms, minus: ActionTerms, step: float):
    """Per piece and per quadrature node central differences."""
    parts = []
    for name in PIECES:
        a, b = getattr(plus, name), getattr(minus, name)
        if a.size == 0:
            continue
        diff = (a - b).reshape(a.shape[0], -1).sum(axis=1) / (2 * step)
        if name in ("kinetic", "gradient", "mass"):
            diff = diff * plus.suspension
        parts.append(diff)
    flat = np.concatenate(parts)
    return float(flat.sum()), float(np.max(np.abs(flat)))


def variational_residual(fh: FieldHistory, ph: Optional[ParticleHistory], setup: ActionSetup,
                         direction: str, index, step_scale: float = 1e-5, axis: Optional[int] = None) -> Residual:
    """Central-difference derivative of the action with respect to one node.

    ``direction='field_node'`` varies ``phi[n][j...]`` with ``index = (n, j...)``;
    ``direction='particle_node'`` varies the spatial fiber coordinate ``axis``
    of worldline node ``index`` (all axes when ``axis`` is None, returning the
    worst). Temporal end nodes are held fixed and raise
    :class:`NodeIndexError`. The relative residual divides by the largest
    single contribution (one piece at one quadrature node).

    Only the time slab touched by the varied node is re-evaluated; all other
    contributions cancel identically in the difference.
    """
    if direction == "field_node":
        index = tuple(int(i) for i in np.atleast_1d(index))
        n = index[0]
        N = fh.times.size - 1
        if not 0 < n < N:
            raise NodeIndexError(f"field node {n} lies on the temporal boundary")
        if len(index) != fh.grid.d + 1:
            raise NodeIndexError("field index needs a time node and one index per axis")
        lo, hi = max(0, n - 2), min(N, n + 2)
        slab = fh.slab(lo, hi)
        pslab = None
        if ph is not None and ph.eps != 0:
            X = setup.eta.backward(ph.z)
            k = np.nonzero((X[:, 0] >= fh.times[lo] - 1e-12) & (X[:, 0] <= fh.times[hi] + 1e-12))[0]
            if k.size >= 2:
                pslab = ph.slab(k[0], k[-1])
        scale = float(np.max(np.abs(fh.phi))) or 1.0
        step = step_scale * scale
        loc = (n - lo,) + index[1:]
        terms = []
        for sgn in (+1, -1):
            phi = slab.phi.copy()
            phi[loc] += sgn * step
            terms.append(action_terms(slab.replace_phi(phi), pslab, setup, check_alignment=False))
        q = _suspension(setup, ph, fh)
        for t in terms:
            t.suspension = q
        der, big = _piece_derivatives(terms[0], terms[1], step)
        return Residual(direction, index, der, big)

    if direction == "particle_node":
        if ph is None:
            raise NodeIndexError("no particle history to vary")
        k = int(index)
        K = ph.lam.size - 1
        if not 0 < k < K:
            raise NodeIndexError(f"particle node {k} lies on the worldline boundary")
        lo, hi = max(0, k - 2), min(K, k + 2)
        pslab = ph.slab(lo, hi)
        X = setup.eta.backward(pslab.z)
        n0 = max(0, int(np.searchsorted(fh.times, X[0, 0] - 1e-12)) - 1)
        n1 = min(fh.times.size - 1, int(np.searchsorted(fh.times, X[-1, 0] + 1e-12)) + 1)
        fslab = fh.slab(n0, n1)
        step = step_scale * float(np.min(fh.grid.spacing))
        axes = range(ph.z.shape[1] - 1) if axis is None else [axis]
        worst = None
        for ax in axes:
            terms = []
            for sgn in (+1, -1):
                z = pslab.z.copy()
                z[k - lo, ax + 1] += sgn * step
                terms.append(_particle_only_terms(fslab, pslab.replace_z(z), setup))
            der, big = _piece_derivatives(terms[0], terms[1], step)
            res = Residual(direction, (k, ax), der, big)
            if worst is None or res.relative > worst.relative:
                worst = res
        return worst

    raise ConfigError(f"unknown variation direction {direction!r}")


def _particle_only_terms(fh, ph, setup):
    inter, free, _ = particle_terms(fh, ph, setup, check_alignment=False)
    empty = np.zeros((0,))
    return ActionTerms(empty, empty, empty, inter, free)


def equivariance_probe(phi_fn, G: Metric, sigma: CovarianceMap, grid: GridSpec, M: float, times) -> float:
    """Difference of the free field action under a simultaneous pushforward of ``(phi, G)``.

    ``phi_fn`` maps events to field values; the transformed field is
    ``phi o sigma^-1`` on the same grid and the transformed metric is
    ``sigma_* G``. In the continuum both actions coincide.
    """
    from .geometry import PushforwardMetric

    times = np.asarray(times, dtype=float)
    ev = np.stack([grid.events(t) for t in times])
    base = FieldHistory(grid, times, phi_fn(ev))
    moved = FieldHistory(grid, times, phi_fn(sigma.backward(ev)))
    Gs = PushforwardMetric(G, sigma)
    a = sum(x.sum() for x in kg_terms(base, G, M))
    b = sum(x.sum() for x in kg_terms(moved, Gs, M))
    return float(abs(a - b))
