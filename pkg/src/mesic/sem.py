"""Stress-energy-momentum densities of the coupled system and their audits.

All stored tensors are contravariant densities ``T^{mu nu}`` on the grid,
with array shape ``grid.shape + (d + 1, d + 1)``. The canonical field part
carries the overall sign that makes its energy density non-negative in the
``(+,-,...,-)`` signature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, AuditError, ConfigError, WindowError
from .geometry import CovarianceMap, DeltaKernel, LambdaMeasure, Metric
from .kg_field import FieldState, GridSpec, KGOperator, gather, scatter, worldline_collapse
from .lagrangian import FieldHistory, ParticleHistory, kg_terms, node_tangents
from .particle import ParticleState, fiber_metric, interval


@dataclass
class SemGrid:
    T: np.ndarray
    t_can: np.ndarray
    theta: np.ndarray
    t: float


@dataclass
class SemAux:
    T44: float
    T4nu: np.ndarray
    Tmu4: np.ndarray


@dataclass
class DivergenceReport:
    D: np.ndarray
    l2: float
    linf: float
    weak: Optional[float]


def centered_gradient(phi, grid: GridSpec):
    """Spatial gradient by centered differences, stacked on a trailing axis."""
    out = []
    for i, h in enumerate(grid.spacing):
        if grid.periodic:
            out.append((np.roll(phi, -1, axis=i) - np.roll(phi, 1, axis=i)) / (2 * h))
        else:
            out.append(np.gradient(phi, h, axis=i))
    return np.stack(out, axis=-1)


def kg_sem(s: FieldState, G: Metric, M: float, phi_t: Optional[np.ndarray] = None) -> np.ndarray:
    """Canonical field tensor ``1/2((2 G^ma G^nb - G^mn G^ab) phi_a phi_b + G^mn M^2 phi^2) sqrt|G|``.

    ``phi_t`` defaults to the stored ``pi``.
    """
    grid = s.grid
    phit = s.pi if phi_t is None else phi_t
    d_phi = np.concatenate([np.asarray(phit)[..., None], centered_gradient(s.phi, grid)], axis=-1)
    ev = grid.events(s.t)
    Ginv = G.inverse(ev)
    up = np.einsum("...mn,...n->...m", Ginv, d_phi)
    quad = np.einsum("...m,...m->...", d_phi, up)
    vol = G.vol_density(ev)
    core = 2 * up[..., :, None] * up[..., None, :] - Ginv * quad[..., None, None]
    core = core + Ginv * (M * M * s.phi * s.phi)[..., None, None]
    return 0.5 * core * vol[..., None, None]


def theta_from_state(p: ParticleState, eta: CovarianceMap, kernel: DeltaKernel, grid: GridSpec, G: Metric):
    """Minkowski tensor density of one worldline sample, collapsed at its coordinate time."""
    X = eta.backward(p.z)
    u = eta.inv_jacobian(X) @ p.zdot
    nrm, collapse = worldline_collapse(u, G.components(X))
    S = scatter(grid, kernel, X[1:], 1.0)
    return (np.outer(u, u) * (collapse / nrm)) * S[..., None, None]


def _bracket(history: ParticleHistory, eta: CovarianceMap, G: Metric, t: float):
    times = eta.backward(history.z)[:, 0]
    tol = 1e-9 * max(1.0, abs(times[-1] - times[0]))
    if t < times[0] - tol or t > times[-1] + tol:
        raise WindowError(f"particle history does not bracket t={t}")
    k = int(np.clip(np.searchsorted(times, t) - 1, 0, times.size - 2))
    s = (t - times[k]) / (times[k + 1] - times[k])
    tang = node_tangents(history, fiber_metric(G, eta))
    z = (1 - s) * history.z[k] + s * history.z[k + 1]
    zdot = (1 - s) * tang[k] + s * tang[k + 1]
    lam = (1 - s) * history.lam[k] + s * history.lam[k + 1]
    return ParticleState(z, zdot, lam, "coordinate_time", history.m, history.eps)


def minkowski_theta(history: ParticleHistory, eta: CovarianceMap, kernel: DeltaKernel, grid: GridSpec,
                    t: float, G: Metric) -> np.ndarray:
    """Minkowski tensor density at grid time ``t`` from a sampled worldline.

    The worldline event and tangent are interpolated linearly between the
    bracketing nodes; node tangents carry the discrete node speeds.
    """
    return theta_from_state(_bracket(history, eta, G, t), eta, kernel, grid, G)


def total_sem(s: FieldState, p: Optional[ParticleState], G: Metric, eta: CovarianceMap, kernel: DeltaKernel,
              M: float, phi_t: Optional[np.ndarray] = None, theta: Optional[np.ndarray] = None) -> SemGrid:
    """``T = t_can + (m + eps phi) theta`` with ``phi`` the field value at every cell."""
    t_can = kg_sem(s, G, M, phi_t)
    D = s.grid.d + 1
    if p is None:
        th = np.zeros(s.grid.shape + (D, D))
        return SemGrid(t_can.copy(), t_can, th, s.t)
    tp = eta.backward(p.z)[0]
    if abs(tp - s.t) > 1e-9 * max(1.0, abs(s.t)):
        raise AlignmentError(f"particle sample at t={tp} but field at t={s.t}")
    th = theta_from_state(p, eta, kernel, s.grid, G) if theta is None else theta
    weight = p.m + p.eps * s.phi
    return SemGrid(t_can + weight[..., None, None] * th, t_can, th, s.t)


def sem_at(record, n: int) -> SemGrid:
    """Total tensor at time node ``n`` of a run record (centered time derivative)."""
    sc = record.scenario
    s = FieldState(record.phi[n], np.zeros(sc.grid.shape), float(record.times[n]), sc.grid)
    p = None
    if record.particle is not None:
        p = _bracket(record.particle, sc.eta, sc.G, float(record.times[n]))
    return total_sem(s, p, sc.G, sc.eta, sc.kernel, sc.M, phi_t=record.phi_t(n))


def _l2(a, grid: GridSpec):
    return math.sqrt(float(np.sum(a * a)) * grid.cell_volume)


def mollify(a, grid: GridSpec, width: float):
    """Periodic Gaussian smoothing of every component (physical width ``width``)."""
    axes = tuple(range(grid.d))
    spectrum = np.fft.fftn(a, axes=axes)
    filt = np.ones(grid.shape)
    for i, (n, h) in enumerate(zip(grid.n, grid.spacing)):
        k = 2 * np.pi * np.fft.fftfreq(n, d=h)
        shape = [1] * grid.d
        shape[i] = -1
        filt = filt * np.exp(-0.5 * (k * width) ** 2).reshape(shape)
    extra = (1,) * (a.ndim - grid.d)
    return np.real(np.fft.ifftn(spectrum * filt.reshape(grid.shape + extra), axes=axes))


def sem_divergence(sems: Sequence[SemGrid], dt: float, grid: GridSpec,
                   mollifier_width: Optional[float] = None) -> DivergenceReport:
    """``D^mu = d_nu T^{mu nu}`` at the middle of three consecutive snapshots.

    ``l2`` and ``linf`` are divided by the L2 norm of the middle tensor.
    ``weak`` applies the same Gaussian smoothing to ``D`` and to the tensor
    before taking the ratio (periodic grids only), so its denominator does
    not depend on how sharply the kernel resolves the particle.
    """
    if len(sems) < 3:
        raise ConfigError("divergence needs three consecutive snapshots")
    a, b, c = sems[0], sems[1], sems[2]
    D = (c.T[..., :, 0] - a.T[..., :, 0]) / (2 * dt)
    for i, h in enumerate(grid.spacing):
        comp = b.T[..., :, i + 1]
        if grid.periodic:
            D = D + (np.roll(comp, -1, axis=i) - np.roll(comp, 1, axis=i)) / (2 * h)
        else:
            D = D + np.gradient(comp, h, axis=i)
    norm = _l2(b.T, grid)
    if norm == 0:
        return DivergenceReport(D, 0.0, 0.0, 0.0 if grid.periodic else None)
    weak = None
    if grid.periodic and mollifier_width:
        weak = _l2(mollify(D, grid, mollifier_width), grid) / _l2(mollify(b.T, grid, mollifier_width), grid)
    return DivergenceReport(D, _l2(D, grid) / norm, float(np.max(np.abs(D))) / norm, weak)


def divergence_series(record, stride: int = 1, mollifier_width: Optional[float] = None):
    """Divergence norms at time nodes ``2, 2 + stride, ...`` (centered time derivatives throughout)."""
    rows = []
    sc = record.scenario
    N = record.times.size - 1
    for n in range(2, N - 1, stride):
        sems = [sem_at(record, k) for k in (n - 1, n, n + 1)]
        rep = sem_divergence(sems, sc.dt, sc.grid, mollifier_width)
        rows.append({"time": float(record.times[n]), "l2": rep.l2, "linf": rep.linf, "weak": rep.weak})
    return rows


def sem_aux(fh: FieldHistory, G: Metric, M: float, K: LambdaMeasure, lam: float) -> SemAux:
    """Fifth-axis components: ``T44(lam) = sqrt(K(lam))`` times the free field action; the rest vanish."""
    kin, grad, mass = kg_terms(fh, G, M)
    kg = float(kin.sum() + grad.sum() + mass.sum())
    D = fh.grid.d + 1
    return SemAux(float(K.k_density(lam)) * kg, np.zeros(D), np.zeros(D))


# ---------------------------------------------------------------------------
# Global conservation
# ---------------------------------------------------------------------------

def field_momentum_staggered(phi_a, phi_b, dt, op: KGOperator):
    """Cell densities of ``(T^00, T^i0)`` between two leapfrog levels.

    These are the quadratic forms conserved exactly by source-free leapfrog
    on a homogeneous periodic grid: the staggered energy and the momentum
    ``-<D phi_a, pi>`` built with centered differences.
    """
    grid = op.grid
    pi = (phi_b - phi_a) / dt
    e = 0.5 * op.a * pi * pi + 0.5 * op.mu * phi_a * phi_b
    for i in range(grid.d):
        e = e + 0.5 * op.c_face[i] * op.forward_diff(phi_a, i) * op.forward_diff(phi_b, i) / op.h[i] ** 2
    grads = centered_gradient(phi_a, grid)
    mom = [-(op.c[i] / op.vol) * op.a * pi * grads[..., i] for i in range(grid.d)]
    return np.stack([e] + mom, axis=-1)


def particle_momentum(sc, gm: Metric, z0, z1, phi0: float, phi1: float):
    """Contravariant ``(m + eps phi) u`` of the particle over one time interval."""
    A = sc.m + sc.eps * 0.5 * (phi0 + phi1)
    iv = interval(gm, z0, z1, A)
    Xbar = sc.eta.backward(0.5 * (np.asarray(z0) + np.asarray(z1)))
    return A * (sc.eta.inv_jacobian(Xbar) @ iv.delta) / iv.length


def momentum_between(sc, op: KGOperator, phi_a, phi_b, z=None, phi_at=None) -> tuple:
    """Field and particle ``P^mu`` on the half step between two consecutive time nodes.

    ``z`` and ``phi_at`` hold the worldline node pair and the field sampled
    at it; omit them for a field-only run.
    """
    D = sc.grid.d + 1
    dens = field_momentum_staggered(phi_a, phi_b, sc.dt, op)
    fieldP = dens.reshape(-1, D).sum(axis=0) * sc.grid.cell_volume
    partP = np.zeros(D)
    if z is not None:
        partP = particle_momentum(sc, fiber_metric(sc.G, sc.eta), z[0], z[1], phi_at[0], phi_at[1])
    return fieldP, partP


def momentum_series(record) -> dict:
    """Total ``P^mu`` at every half step, split into field and particle parts."""
    sc = record.scenario
    op = KGOperator(sc.grid, sc.G, sc.M)
    N = record.times.size - 1
    D = sc.grid.d + 1
    fieldP = np.zeros((N, D))
    partP = np.zeros((N, D))
    hist = record.particle
    for n in range(N):
        pair = {} if hist is None else {"z": hist.z[n:n + 2], "phi_at": record.phi_at_particle[n:n + 2]}
        fieldP[n], partP[n] = momentum_between(sc, op, record.phi[n], record.phi[n + 1], **pair)
    return {"field": fieldP, "particle": partP, "total": fieldP + partP,
            "t_half": record.times[:-1] + 0.5 * sc.dt}


def conservation_audit(record, tolerance: Optional[float] = None) -> dict:
    """Largest drift of every total ``P^mu`` relative to ``|P^0|`` at the first half step."""
    sc = record.scenario
    if not sc.grid.periodic:
        raise AuditError("conservation audit needs a periodic grid (boundary flux is not tracked)")
    series = momentum_series(record)
    tol = sc.cfg.audit.drift_tolerance if tolerance is None else tolerance
    drift, passed = _drift(series["total"], tol)
    return {"series": series, "drift": drift, "max_drift": float(np.max(drift)),
            "tolerance": tol, "passed": passed}


def _drift(P, tol):
    ref = abs(P[0, 0])
    if ref == 0:
        raise AuditError("initial energy vanishes; relative drift undefined")
    drift = np.max(np.abs(P - P[0]), axis=0) / ref
    return drift, bool(np.max(drift) <= tol)


def snapshot_audit(stored, tolerance: Optional[float] = None, mollifier_width: Optional[float] = None) -> dict:
    """Divergence and conservation audits from the snapshots of a stored run.

    The divergence is evaluated at every snapshot whose two neighbours are
    stored with centered time derivatives. Momentum totals are evaluated on
    every stored pair of consecutive time nodes.
    """
    sc = stored.scenario
    if not sc.grid.periodic:
        raise AuditError("conservation audit needs a periodic grid (boundary flux is not tracked)")
    width = sc.cfg.audit.mollifier_width if mollifier_width is None else mollifier_width
    N = stored.last_index
    have = set(stored.phi)
    divergence = []
    for n in sorted(have):
        if n - 1 >= 1 and n + 1 <= N - 1 and {n - 1, n + 1} <= have:
            rep = sem_divergence([sem_at(stored, k) for k in (n - 1, n, n + 1)], sc.dt, sc.grid, width)
            divergence.append({"time": float(stored.times[n]), "l2": rep.l2, "linf": rep.linf, "weak": rep.weak})
    op = KGOperator(sc.grid, sc.G, sc.M)
    hist = stored.particle
    rows, totals = [], []
    for n in sorted(have):
        if n + 1 not in have:
            continue
        pair = {} if hist is None else {"z": hist.z[n:n + 2], "phi_at": stored.phi_at_particle[n:n + 2]}
        fP, pP = momentum_between(sc, op, stored.phi[n], stored.phi[n + 1], **pair)
        totals.append(fP + pP)
        row = {"time": float(stored.times[n]) + 0.5 * sc.dt}
        row.update({f"P{mu}": float(v) for mu, v in enumerate(fP + pP)})
        rows.append(row)
    if not totals:
        raise AuditError("no consecutive snapshot pairs to audit")
    tol = sc.cfg.audit.drift_tolerance if tolerance is None else tolerance
    drift, passed = _drift(np.array(totals), tol)
    return {"divergence": divergence, "conservation": rows, "drift": drift,
            "max_drift": float(np.max(drift)), "tolerance": tol, "passed": passed}
