"""Scenario orchestration: coupled field-particle runs and the reference studies.

The coupled run advances field and particle together by solving, at every
time node, the two stationarity conditions of the discrete action of
:mod:`mesic.lagrangian` for the next field level and the next worldline
node. Both conditions share the unknown interval length ahead of the
particle, so the solve is a short fixed-point iteration. The resulting
trajectory is on shell for the oracle up to that iteration's tolerance.

Coupled runs use coordinate-time parameterization in fiber coordinates,
which requires a covariance map that maps time slices to time slices.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .config import ScenarioCfg, n_steps
from .errors import ConfigError, ConvergenceError, EscapeError, MesicError
from .geometry import (AffineMap, CovarianceMap, DeltaKernel, IdentityMap, LambdaMeasure, Metric,
                       Minkowski, SinusoidalMap, gaussian_well)
from .kg_field import (FieldState, GridSpec, KGOperator, SourceGrid, deposit_source, gather,
                       kernel_stencil, step_field, worldline_collapse)
from .lagrangian import ActionSetup, FieldHistory, ParticleHistory, action
from .particle import ParticleState, fiber_metric, interval, unit_from_covector

log = logging.getLogger(__name__)

FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX = 100


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    cfg: ScenarioCfg
    grid: GridSpec
    G: Metric
    eta: CovarianceMap
    kernel: DeltaKernel
    measure: LambdaMeasure
    M: float
    m: float
    eps: float
    dt: float
    steps: int

    @property
    def name(self) -> str:
        return self.cfg.name

    @property
    def has_particle(self) -> bool:
        return self.cfg.particle.enabled

    def action_setup(self, measure: Optional[LambdaMeasure] = None) -> ActionSetup:
        return ActionSetup(self.G, self.M, self.kernel, self.eta, measure or self.measure)


def build_metric(cfg: ScenarioCfg) -> Metric:
    d = cfg.grid.d
    if cfg.metric.kind == "minkowski":
        return Minkowski(d)
    center = cfg.metric.center if cfg.metric.center is not None else [0.0] * d
    return gaussian_well(d, cfg.metric.depth, center, cfg.metric.width)


def build_eta(cfg: ScenarioCfg) -> CovarianceMap:
    e, dim = cfg.eta, cfg.grid.d + 1
    if e.kind == "identity":
        return IdentityMap(dim)
    if e.kind == "affine":
        if e.matrix is None:
            raise ConfigError("eta.matrix is required for an affine covariance map")
        A = np.asarray(e.matrix, dtype=float)
        if A.shape != (dim, dim):
            raise ConfigError(f"eta.matrix must be {dim}x{dim}")
        b = None if e.offset is None else np.asarray(e.offset, dtype=float)
        if b is not None and b.shape != (dim,):
            raise ConfigError(f"eta.offset needs {dim} entries")
        return AffineMap(A, b)
    if e.amplitude is None or e.wavenumber is None:
        raise ConfigError("eta.amplitude and eta.wavenumber are required for a smooth covariance map")
    return SinusoidalMap(e.amplitude, e.wavenumber, e.phase)


def build_scenario(cfg: ScenarioCfg) -> Scenario:
    g = cfg.grid
    origin = g.origin if g.origin is not None else [-0.5 * e for e in g.extents]
    grid = GridSpec(g.d, tuple(g.extents), tuple(g.n), g.boundary, tuple(origin), g.sponge_width, g.sponge_damping)
    kernel = DeltaKernel(cfg.kernel.shape, cfg.kernel.width)
    grid.check_kernel(kernel)
    lm = cfg.lambda_measure
    measure = LambdaMeasure(lm.kind, tuple(lm.domain or (0.0, cfg.time.duration)), lm.center, lm.halfwidth,
                            lm.points, lm.values)
    eta = build_eta(cfg)
    if eta.dim != g.d + 1:
        raise ConfigError("covariance map dimension does not match the grid")
    if cfg.particle.enabled and not eta.preserves_slicing:
        raise ConfigError("coupled runs need a covariance map that preserves time slices")
    return Scenario(cfg, grid, build_metric(cfg), eta, kernel, measure,
                    cfg.physics.M, cfg.physics.m, cfg.physics.eps, float(cfg.time.dt), n_steps(cfg))


def validate_scenario(cfg: ScenarioCfg) -> Scenario:
    sc = build_scenario(cfg)
    op = KGOperator(sc.grid, sc.G, sc.M)
    if sc.dt > op.max_stable_dt(0.9) * (1 + 1e-12):
        from .errors import CFLError

        raise CFLError(f"time.dt={sc.dt} exceeds the stability bound {op.max_stable_dt(0.9):.6g}")
    lo = np.array(sc.grid.origin)
    hi = lo + np.array(sc.grid.extents)
    for p in cfg.outputs.probes:
        if len(p) != sc.grid.d or np.any(np.array(p) < lo) or np.any(np.array(p) >= hi):
            raise ConfigError(f"outputs.probes: probe {p} lies outside the grid")
    if cfg.particle.enabled:
        if len(cfg.particle.position) != sc.grid.d or len(cfg.particle.velocity) != sc.grid.d:
            raise ConfigError("particle.position and particle.velocity need d components")
        if float(np.dot(cfg.particle.velocity, cfg.particle.velocity)) >= 1:
            raise ConfigError("particle.velocity must be subluminal")
    if cfg.initial.self_field and sc.M <= 0:
        raise ConfigError("initial.self_field needs M > 0")
    return sc


# ---------------------------------------------------------------------------
# Initial data
# ---------------------------------------------------------------------------

def _offsets(grid: GridSpec, center):
    xs = grid.coords()
    off = xs - np.asarray(center, dtype=float)
    if grid.periodic:
        L = np.asarray(grid.extents)
        off = off - L * np.round(off / L)
    return off


def _pulse(grid: GridSpec, amplitude, center, width, direction):
    off = _offsets(grid, center)
    phi = amplitude * np.exp(-0.5 * np.sum(off ** 2, axis=-1) / width ** 2)
    # a pulse moving along the first axis at unit speed
    return phi, direction * phi * off[..., 0] / width ** 2


def initial_field(sc: Scenario):
    """Initial ``(phi, phi_t)`` from the configured pulses, modes and self-field."""
    grid = sc.grid
    init = sc.cfg.initial
    phi = np.zeros(grid.shape)
    phit = np.zeros(grid.shape)
    for p in init.pulses:
        if len(p.center) != grid.d:
            raise ConfigError("initial.pulses: center needs d components")
        a, b = _pulse(grid, p.amplitude, p.center, p.width, p.direction)
        phi += a
        phit += b
    xs = grid.coords()
    for md in init.modes:
        if len(md.index) != grid.d:
            raise ConfigError("initial.modes: index needs d components")
        k = 2 * np.pi * np.asarray(md.index) / np.asarray(grid.extents)
        omega = math.sqrt(float(k @ k) + sc.M ** 2)
        arg = xs @ k
        phi += md.amplitude * np.cos(arg)
        phit += md.direction * md.amplitude * omega * np.sin(arg)
    r = init.random
    if r.count:
        rng = np.random.Generator(np.random.PCG64(sc.cfg.seed))
        lo = np.asarray(grid.origin)
        L = np.asarray(grid.extents)
        for _ in range(r.count):
            c = lo + rng.random(grid.d) * L
            amp = r.amplitude * rng.uniform(-1, 1)
            a, _ = _pulse(grid, amp, c, r.width, 0)
            phi += a
    if init.self_field and sc.has_particle and sc.eps != 0:
        phi += solve_static_yukawa(sc)[0].phi
    return phi, phit


# ---------------------------------------------------------------------------
# Static limit
# ---------------------------------------------------------------------------

def solve_static_yukawa(sc: Scenario, position: Optional[Sequence[float]] = None, tol: float = 1e-10,
                        maxiter: int = 50_000):
    """Equilibrium field of a pinned particle: ``(M^2 - L) phi = -source``.

    Solved by conjugate gradients on the symmetric positive definite grid
    operator. Returns the field and ``{'residual', 'iterations'}`` where the
    residual is the relative 2-norm of the static equation.
    """
    if sc.M <= 0:
        raise ConfigError("the static solve needs M > 0")
    grid = sc.grid
    X0 = np.asarray(sc.cfg.particle.position if position is None else position, dtype=float)
    op = KGOperator(grid, sc.G, sc.M)
    z = sc.eta.forward(np.concatenate([[0.0], X0]))
    zdot = sc.eta.jacobian(np.concatenate([[0.0], X0])) @ np.eye(grid.d + 1)[0]
    p = ParticleState(z, zdot, 0.0, "coordinate_time", sc.m, sc.eps)
    src = deposit_source(p, sc.eta, sc.kernel, grid, sc.G)
    b = -(op.vol * src.rho).ravel()
    if not np.any(b):
        return FieldState.zeros(grid), {"residual": 0.0, "iterations": 0}
    shape = grid.shape
    count = {"n": 0}

    def matvec(v):
        v = v.reshape(shape)
        return (op.mu * v - op.divergence_term(v)).ravel()

    def cb(_):
        count["n"] += 1

    A = LinearOperator((b.size, b.size), matvec=matvec, dtype=float)
    x, info = cg(A, b, rtol=tol * 1e-2, atol=0.0, maxiter=maxiter, callback=cb)
    res = float(np.linalg.norm(matvec(x) - b) / np.linalg.norm(b))
    if info != 0 or res > tol:
        raise ConvergenceError(f"static solve stalled at relative residual {res:.3g}")
    return FieldState(x.reshape(shape), np.zeros(shape), 0.0, grid), {"residual": res, "iterations": count["n"]}


def yukawa_reference(grid: GridSpec, center, eps: float, M: float) -> np.ndarray:
    """Analytic point-source Yukawa field at the grid nodes.

    On a periodic grid the free-space Green function is summed over enough
    image copies that the omitted ones fall below double precision.
    """
    X = grid.coords() - np.asarray(center, dtype=float)
    shifts = [np.zeros(grid.d)]
    if grid.periodic:
        reach = [int(math.ceil(40.0 / (M * L))) for L in grid.extents]
        ranges = [np.arange(-r, r + 1) * L for r, L in zip(reach, grid.extents)]
        shifts = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, grid.d)
    out = np.zeros(grid.shape)
    for s in shifts:
        r = np.sqrt(np.sum((X - s) ** 2, axis=-1))
        if grid.d == 1:
            out += -(eps / (2 * M)) * np.exp(-M * r)
        elif grid.d == 3:
            out += -(eps / (4 * math.pi)) * np.exp(-M * r) / np.where(r > 0, r, np.inf)
        else:
            raise ConfigError("the analytic Yukawa profile is provided for d = 1 and d = 3")
    return out


def yukawa_check(sc: Scenario, inner: float, outer: Optional[float] = None) -> dict:
    """Deviation of the static solve from :func:`yukawa_reference`.

    Nodes at distance ``inner <= r <= outer`` from the particle are compared.
    ``max_relative`` is the worst single node. ``profile_max_relative`` is
    the worst radial shell (width one grid spacing) after averaging both
    fields over the shell, which removes the cubic anisotropy of the lattice
    Laplacian near the source.
    """
    state, info = solve_static_yukawa(sc)
    center = np.asarray(sc.cfg.particle.position, dtype=float)
    ref = yukawa_reference(sc.grid, center, sc.eps, sc.M)
    r = np.sqrt(np.sum((sc.grid.coords() - center) ** 2, axis=-1))
    mask = r >= inner
    if outer is not None:
        mask &= r <= outer
    rel = np.abs(state.phi[mask] - ref[mask]) / np.abs(ref[mask])
    worst = int(np.argmax(rel))
    rm, phim, refm = r[mask], state.phi[mask], ref[mask]
    h = float(np.max(sc.grid.spacing))
    edges = np.arange(inner, rm.max() + h, h)
    shell = np.digitize(rm, edges)
    profile = [abs(phim[shell == b].mean() / refm[shell == b].mean() - 1) for b in np.unique(shell)]
    return {"max_relative": float(rel[worst]), "at_radius": float(r[mask][worst]),
            "profile_max_relative": float(max(profile)),
            "nodes": int(mask.sum()), **info, "phi": state.phi, "reference": ref}


# ---------------------------------------------------------------------------
# Coupled stepping
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    scenario: Scenario
    times: np.ndarray
    phi: np.ndarray
    particle: Optional[ParticleHistory]
    phi_at_particle: Optional[np.ndarray] = None
    iterations: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def field_history(self) -> FieldHistory:
        return FieldHistory(self.scenario.grid, self.times, self.phi)

    def field_state(self, n: int) -> FieldState:
        dt = self.scenario.dt
        prev = self.phi[n - 1] if n > 0 else self.phi[0]
        pi = (self.phi[n] - prev) / dt
        return FieldState(self.phi[n].copy(), pi, float(self.times[n]), self.scenario.grid)

    def phi_t(self, n: int) -> np.ndarray:
        """Centered time derivative at node ``n`` (one-sided at the ends)."""
        dt = self.scenario.dt
        N = self.times.size - 1
        if 0 < n < N:
            return (self.phi[n + 1] - self.phi[n - 1]) / (2 * dt)
        if n == 0:
            return (self.phi[1] - self.phi[0]) / dt
        return (self.phi[N] - self.phi[N - 1]) / dt

    def action(self, measure: Optional[LambdaMeasure] = None):
        return action(self.field_history(), self.particle, self.scenario.action_setup(measure))

    def physical_trajectory(self) -> np.ndarray:
        return self.scenario.eta.backward(self.particle.z)


class CoupledStepper:
    """Advances ``(phi, pi)`` and the worldline nodes by the discrete stationarity conditions."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.op = KGOperator(sc.grid, sc.G, sc.M)
        self.gm = fiber_metric(sc.G, sc.eta)
        self.tau_scale = float(sc.eta.jacobian(np.zeros(sc.grid.d + 1))[0, 0])

    # -- helpers -----------------------------------------------------------
    def _stencil(self, z):
        X = self.sc.eta.backward(z)
        st = kernel_stencil(self.sc.grid, self.sc.kernel, X[1:])
        if st is None:
            raise EscapeError(f"particle kernel left the grid at x={X[1:]}")
        return X, st

    def _gather(self, arr, st):
        ix, W, dW = st
        vol = self.sc.grid.cell_volume
        vals = arr[ix]
        return float((vals * W).sum() * vol), np.array([(vals * g).sum() * vol for g in dW])

    def _spatial_gradient(self, X, gradX):
        kappa = self.sc.eta.inv_jacobian(X)
        return kappa[1:, 1:].T @ gradX

    # -- one step ------------------------------------------------------------
    def advance(self, state: FieldState, z_prev, z_cur, phi_prev_at: float):
        """Next field state, next worldline node and bookkeeping for node ``z_cur``."""
        sc, op = self.sc, self.op
        dt = sc.dt
        X, st = self._stencil(z_cur)
        ix, W, _ = st
        phi_cur_at, gradX = self._gather(state.phi, st)
        grad_y = self._spatial_gradient(X, gradX)
        A_minus = sc.m + sc.eps * 0.5 * (phi_prev_at + phi_cur_at)
        back = interval(self.gm, z_prev, z_cur, A_minus)

        shape = np.zeros(sc.grid.shape)
        np.add.at(shape, ix, W)
        phi_free = state.phi + dt * (state.pi + dt * op.accel(state.phi))
        shape_over_a = shape / op.a
        dtau = z_cur[0] - z_prev[0]

        z_next = 2 * z_cur - z_prev
        it = 0
        for it in range(1, FIXED_POINT_MAX + 1):
            ahead_len = interval(self.gm, z_cur, z_next, 1.0)
            ell_sum = back.length + ahead_len.length
            _, st_next = self._stencil(z_next)
            free_at, _ = self._gather(phi_free, st_next)
            shape_at, _ = self._gather(shape_over_a, st_next)
            phi_next_at = free_at - 0.5 * dt * sc.eps * ell_sum * shape_at
            A_plus = sc.m + sc.eps * 0.5 * (phi_cur_at + phi_next_at)
            ahead = interval(self.gm, z_cur, z_next, A_plus)
            R = (back.momentum[1:] + 0.5 * sc.eps * grad_y * ell_sum
                 + back.metric_force[1:] + ahead.metric_force[1:])
            g = ahead.metric
            u = unit_from_covector(g, R / A_plus) if A_plus > 0 else None
            if u is None:
                raise ConvergenceError("effective mass is not positive")
            z_new = z_cur + dtau * u / u[0]
            delta = float(np.max(np.abs(z_new - z_next)))
            z_next = z_new
            if delta < FIXED_POINT_TOL * float(np.min(sc.grid.spacing)):
                break
        else:
            raise ConvergenceError("coupled fixed-point iteration did not converge")
        ell_sum = back.length + interval(self.gm, z_cur, z_next, 1.0).length
        rho = sc.eps * ell_sum / (2 * dt) * shape / op.vol
        new_state = step_field(state, SourceGrid(rho, state.t), dt, sc.G, sc.M, op)
        return new_state, z_next, phi_cur_at, it

    def initial(self, phi0, phit0):
        """Field state at ``t = 0`` with ``pi`` at ``-dt/2`` and the virtual node behind the particle."""
        sc, op = self.sc, self.op
        dt = sc.dt
        src = None
        z0 = zm1 = None
        if sc.has_particle:
            X0 = np.asarray(sc.cfg.particle.position, dtype=float)
            v0 = np.asarray(sc.cfg.particle.velocity, dtype=float)
            e0 = np.concatenate([[0.0], X0])
            em1 = np.concatenate([[-dt], X0 - dt * v0])
            z0, zm1 = sc.eta.forward(e0), sc.eta.forward(em1)
            u = np.concatenate([[1.0], v0])
            nrm, collapse = worldline_collapse(u, sc.G.components(e0))
            st = kernel_stencil(sc.grid, sc.kernel, X0)
            if st is None:
                raise EscapeError("particle kernel starts outside the grid")
            shape = np.zeros(sc.grid.shape)
            np.add.at(shape, st[0], st[1])
            src = sc.eps * nrm * collapse * shape
        acc = op.accel(phi0, src)
        pi = phit0 - 0.5 * dt * acc
        state = FieldState(np.array(phi0, dtype=float), pi, 0.0, sc.grid)
        return state, zm1, z0


def run(sc: Scenario, out: Optional[Path] = None, progress: bool = False) -> RunRecord:
    """Integrate a scenario; with ``out`` also write the run directory.

    On a solver error the partial record is written together with an
    ``ERROR`` marker and the error is re-raised.
    """
    from . import io as rio

    stepper = CoupledStepper(sc)
    phi0, phit0 = initial_field(sc)
    state, zm1, z0 = stepper.initial(phi0, phit0)
    N = sc.steps
    phis = np.empty((N + 1,) + sc.grid.shape)
    phis[0] = state.phi
    times = np.arange(N + 1) * sc.dt
    zs = None
    phi_at = None
    iters = []
    record = RunRecord(sc, times, phis, None)
    if sc.has_particle:
        zs = np.empty((N + 1, sc.grid.d + 1))
        zs[0] = z0
        phi_at = np.zeros(N + 1)
        fm1 = state.phi - sc.dt * state.pi
        _, st = stepper._stencil(zm1)
        phi_prev_at, _ = stepper._gather(fm1, st)
    err = None
    n_done = 0
    try:
        for n in range(N):
            if sc.has_particle:
                z_prev = zm1 if n == 0 else zs[n - 1]
                state, z_next, phi_at[n], it = stepper.advance(state, z_prev, zs[n], phi_prev_at)
                phi_prev_at = phi_at[n]
                zs[n + 1] = z_next
                iters.append(it)
            else:
                state = step_field(state, None, sc.dt, sc.G, sc.M, stepper.op)
            phis[n + 1] = state.phi
            n_done = n + 1
            if progress and (n + 1) % max(1, N // 10) == 0:
                log.info("step %d/%d", n + 1, N)
        if sc.has_particle:
            _, st = stepper._stencil(zs[N])
            phi_at[N], _ = stepper._gather(phis[N], st)
    except MesicError as exc:
        err = exc
    keep = n_done + 1
    record.times = times[:keep]
    record.phi = phis[:keep]
    record.iterations = iters
    if sc.has_particle:
        lam = zs[:keep, 0].copy()
        record.particle = ParticleHistory(lam, zs[:keep], sc.m, sc.eps) if keep > 1 else None
        record.phi_at_particle = phi_at[:keep]
    if keep > 1:
        record.diagnostics = diagnostics(record)
    if out is not None:
        rio.write_run(record, Path(out), error=err)
    if err is not None:
        raise err
    return record


def diagnostics(record: RunRecord) -> list:
    """Per-step conserved totals, particle state and probe values."""
    from .sem import momentum_series

    sc = record.scenario
    series = momentum_series(record)
    rows = []
    probes = sc.cfg.outputs.probes
    for n in range(record.times.size - 1):
        row = {"step": n, "t_half": float(record.times[n] + 0.5 * sc.dt)}
        for mu in range(sc.grid.d + 1):
            row[f"P{mu}"] = float(series["total"][n, mu])
        row["field_energy"] = float(series["field"][n, 0])
        row["particle_energy"] = float(series["particle"][n, 0])
        for i, p in enumerate(probes):
            row[f"probe_{i}"] = gather(sc.grid, sc.kernel, record.phi[n], p)[0]
        if record.iterations:
            row["iterations"] = record.iterations[n]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Covariance-map invariance
# ---------------------------------------------------------------------------

def eta_invariance_test(sc: Scenario, eta1: CovarianceMap, eta2: Optional[CovarianceMap] = None) -> dict:
    """Run one physical scenario under two covariance maps and compare.

    Returns the largest deviation of the physical trajectories and the
    absolute and relative deviation of the action values.
    """
    if eta2 is None:
        eta2 = AffineMap(np.diag([1.0] + [2.0] + [1.0] * (sc.grid.d - 1)), np.full(sc.grid.d + 1, 0.25))
    runs = [run(replace(sc, eta=e)) for e in (eta1, eta2)]
    X = [r.physical_trajectory() for r in runs]
    S = [r.action().value for r in runs]
    return {
        "trajectory": float(np.max(np.abs(X[0] - X[1]))),
        "action": float(abs(S[0] - S[1])),
        "action_relative": float(abs(S[0] - S[1]) / max(abs(S[0]), 1e-300)),
        "action_values": S,
    }


# ---------------------------------------------------------------------------
# Free-field studies
# ---------------------------------------------------------------------------

def _periodic_line(n, L, M):
    grid = GridSpec(1, (L,), (n,), "periodic", (0.0,))
    return grid, KGOperator(grid, Minkowski(1), M)


def _leapfrog_plane_wave(n, L, k, M, dt, steps, probe_index=0):
    """Free leapfrog run started from an exact traveling wave; returns probe series and final field."""
    grid, op = _periodic_line(n, L, M)
    x = grid.axes()[0]
    omega = math.sqrt(k * k + M * M)
    phi = np.cos(k * x)
    state = FieldState(phi, (phi - np.cos(k * x + omega * dt)) / dt, 0.0, grid)
    series = np.empty(steps + 1)
    series[0] = phi[probe_index]
    G = Minkowski(1)
    for s in range(steps):
        state = step_field(state, None, dt, G, M, op)
        series[s + 1] = state.phi[probe_index]
    return series, state, x, omega


def measure_frequency(series, dt) -> float:
    """Peak angular frequency of a real series (Hann window, zero padding, parabolic peak)."""
    sig = (series - series.mean()) * np.hanning(series.size)
    nfft = 1 << int(math.ceil(math.log2(series.size * 8)))
    spectrum = np.abs(np.fft.rfft(sig, nfft))
    i = int(np.argmax(spectrum[1:-1])) + 1
    a, b, c = np.log(spectrum[i - 1:i + 2])
    shift = 0.5 * (a - c) / (a - 2 * b + c)
    return 2 * math.pi * (i + shift) / (nfft * dt)


def dispersion_study(n: int = 512, L: float = 2 * math.pi, modes=(1, 2, 4), masses=(0.0, 1.0),
                     duration: float = 120.0, cfl: float = 0.5):
    """Measured versus continuum frequency ``sqrt(k^2 + M^2)`` for traveling waves."""
    rows = []
    h = L / n
    steps = int(math.ceil(duration / (cfl * h)))
    dt = duration / steps
    for M in masses:
        for j in modes:
            k = 2 * math.pi * j / L
            series, _, _, omega = _leapfrog_plane_wave(n, L, k, M, dt, steps)
            w = measure_frequency(series, dt)
            rows.append({"k": k, "M": M, "omega": w, "expected": omega, "relative_error": abs(w - omega) / omega})
    return rows


def convergence_ladder(ns=(32, 64, 128, 256), L: float = 2 * math.pi, mode: int = 2, M: float = 1.0,
                       duration: float = 2.0, cfl: float = 0.5):
    """L2 error against the analytic traveling wave at a fixed final time, per resolution."""
    k = 2 * math.pi * mode / L
    errors = []
    for n in ns:
        h = L / n
        steps = int(round(duration / (cfl * h)))
        dt = duration / steps
        _, state, x, omega = _leapfrog_plane_wave(n, L, k, M, dt, steps)
        exact = np.cos(k * x - omega * duration)
        errors.append(float(np.sqrt(np.sum((state.phi - exact) ** 2) * h)))
    orders = [math.log2(errors[i] / errors[i + 1]) for i in range(len(errors) - 1)]
    return {"n": list(ns), "errors": errors, "orders": orders}


# ---------------------------------------------------------------------------
# Divergence refinement
# ---------------------------------------------------------------------------

def divergence_ladder(cfg: ScenarioCfg, factors=(1, 2, 4, 8), kernel_scaling: str = "cells",
                      mollifier_width: Optional[float] = None, samples: int = 32) -> dict:
    """RMS divergence norms of the total tensor as the grid is refined.

    Each rung multiplies ``grid.n`` by the factor. With ``kernel_scaling``
    ``"cells"`` the kernel keeps its width in grid cells and so shrinks with
    ``h``; with ``"physical"`` its physical width is held fixed.
    """
    from .config import _deep_merge, resolve_config
    from .sem import divergence_series

    if kernel_scaling not in ("cells", "physical"):
        raise ConfigError(f"kernel_scaling must be 'cells' or 'physical', got {kernel_scaling!r}")
    width = mollifier_width if mollifier_width is not None else cfg.audit.mollifier_width
    base = cfg.model_dump(mode="json")
    base.pop("scenario", None)
    base["time"]["dt"] = None
    rows = []
    for f in factors:
        data = _deep_merge(base, {"grid": {"n": [n * f for n in cfg.grid.n]}})
        if kernel_scaling == "physical":
            data["kernel"]["width"] = cfg.kernel.width * f
        rec = run(build_scenario(resolve_config(data)))
        N = rec.times.size - 1
        series = divergence_series(rec, stride=max(1, N // samples), mollifier_width=width)
        rms = lambda key: float(np.sqrt(np.mean([r[key] ** 2 for r in series])))
        rows.append({"n": cfg.grid.n[0] * f, "l2": rms("l2"),
                     "weak": rms("weak") if series[0]["weak"] is not None else None})

    def orders(key):
        vals = [r[key] for r in rows]
        if any(v is None or v <= 0 for v in vals):
            return None
        steps = [math.log2(vals[i] / vals[i + 1]) for i in range(len(vals) - 1)]
        fit = -np.polyfit(np.log2([r["n"] for r in rows]), np.log2(vals), 1)[0]
        return {"steps": steps, "fit": float(fit)}

    return {"rows": rows, "l2_order": orders("l2"), "weak_order": orders("weak")}


# ---------------------------------------------------------------------------
# Variational oracle sweep
# ---------------------------------------------------------------------------

def _oracle_field_nodes(record: RunRecord, count: int, rng) -> list:
    sc = record.scenario
    N = record.times.size - 1
    margin = 0 if sc.grid.periodic else 2
    picks = []
    near = []
    if record.particle is not None and sc.eps != 0:
        X = sc.eta.backward(record.particle.z)
        for n in rng.choice(np.arange(1, N), size=min(count // 2, N - 1), replace=False):
            j = np.rint((X[n, 1:] - sc.grid.origin) / sc.grid.spacing).astype(int)
            near.append((int(n),) + tuple(int(v) % m for v, m in zip(j, sc.grid.n)))
    while len(picks) + len(near) < count:
        n = int(rng.integers(1, N))
        j = tuple(int(rng.integers(margin, m - margin)) for m in sc.grid.n)
        picks.append((n,) + j)
    return near + picks


def derive_check(record: RunRecord, perturb: bool = False, seed: Optional[int] = None) -> list:
    """Variational residuals at sampled interior nodes of a run.

    With ``perturb`` the stored trajectory is first displaced off shell by
    the configured perturbation (a smooth bump in the field and, if present,
    in the worldline) and the sweep is restricted to the displaced nodes.
    """
    from .lagrangian import variational_residual

    sc = record.scenario
    oc = sc.cfg.oracle
    rng = np.random.default_rng(sc.cfg.seed if seed is None else seed)
    fh = record.field_history()
    ph = record.particle
    setup = sc.action_setup()
    N = record.times.size - 1
    if N < 2:
        raise ConfigError("the oracle needs at least two time steps")
    field_nodes = _oracle_field_nodes(record, oc.field_nodes, rng)
    kp = 0 if ph is None else ph.lam.size - 1
    particle_nodes = [int(k) for k in np.unique(np.linspace(1, kp - 1, oc.particle_nodes).round())] \
        if kp >= 2 and oc.particle_nodes else []

    if perturb:
        n0 = N // 2
        phi = fh.phi.copy()
        centre = tuple(m // 2 for m in sc.grid.n)
        bump = np.zeros(sc.grid.shape)
        bump[centre] = 1.0
        phi[n0] += oc.perturbation * (float(np.max(np.abs(phi))) or 1.0) * bump
        fh = fh.replace_phi(phi)
        field_nodes = [(n0,) + centre]
        if particle_nodes:
            k0 = kp // 2
            z = ph.z.copy()
            z[k0, 1:] += oc.perturbation * float(np.min(sc.grid.spacing))
            ph = ph.replace_z(z)
            particle_nodes = [k0]

    rows = []
    for idx in field_nodes:
        r = variational_residual(fh, ph, setup, "field_node", idx, oc.step_scale)
        rows.append({"direction": "field_node", "index": " ".join(map(str, idx)),
                     "derivative": r.derivative, "scale": r.scale, "relative": r.relative})
    for k in particle_nodes:
        r = variational_residual(fh, ph, setup, "particle_node", k, oc.step_scale)
        rows.append({"direction": "particle_node", "index": f"{k} {r.index[1]}",
                     "derivative": r.derivative, "scale": r.scale, "relative": r.relative})
    return rows
