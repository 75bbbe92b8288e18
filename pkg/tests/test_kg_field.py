import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mesic.errors import ConfigError, DivergenceError, EscapeError, StabilityError
from mesic.geometry import AffineMap, DeltaKernel, IdentityMap, Minkowski, gaussian_well
from mesic.kg_field import (FieldState, GridSpec, KGOperator, deposit_source, field_energy, gather,
                            interpolate_field, step_field)
from mesic.particle import ParticleState

KERNEL = DeltaKernel("bspline_quadratic", 1.0)


def line(n=128, L=20.0, boundary="periodic", **kw):
    return GridSpec(1, (L,), (n,), boundary, (-L / 2,), **kw)


def particle(X, v, eps=0.5):
    X = np.asarray(X, dtype=float)
    v = np.asarray(v, dtype=float)
    return ParticleState(np.concatenate([[0.0], X]), np.concatenate([[1.0], v]), 0.0, "coordinate_time", 1.0, eps)


def test_grid_geometry():
    g = GridSpec(2, (4.0, 6.0), (8, 12), "periodic", (0.0, 0.0))
    np.testing.assert_allclose(g.spacing, [0.5, 0.5])
    assert g.cell_volume == pytest.approx(0.25)
    assert g.coords().shape == (8, 12, 2)
    with pytest.raises(ConfigError):
        GridSpec(1, (1.0,), (10,), "open", (0.0,))
    with pytest.raises(ConfigError):
        line(boundary="sponge", sponge_width=0.1, sponge_damping=1.0).check_kernel(DeltaKernel("bspline_cubic", 3))


# -- deposition --------------------------------------------------------------

def test_deposit_at_rest_on_node():
    g = line()
    x0 = float(g.axes()[0][40])
    src = deposit_source(particle([x0], [0.0]), IdentityMap(2), KERNEL, g, Minkowski(1))
    assert int(np.argmax(src.rho)) == 40
    assert src.rho.sum() * g.cell_volume == pytest.approx(0.5, abs=1e-14)


@given(st.floats(-0.95, 0.95), st.floats(-5, 5))
def test_deposit_total_is_contracted(v, x):
    g = line()
    src = deposit_source(particle([x], [v]), IdentityMap(2), KERNEL, g, Minkowski(1))
    assert src.rho.sum() * g.cell_volume == pytest.approx(0.5 * math.sqrt(1 - v * v), rel=1e-12)


def test_zero_charge_deposits_nothing():
    g = line()
    src = deposit_source(particle([0.3], [0.2], eps=0.0), IdentityMap(2), KERNEL, g, Minkowski(1))
    assert not np.any(src.rho)


@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
def test_deposit_interpolate_adjoint(x, y, vx, vy):
    if vx * vx + vy * vy >= 0.9:
        return
    g = GridSpec(2, (10.0, 10.0), (40, 40), "periodic", (-5.0, -5.0))
    phi = np.sin(g.coords()[..., 0]) * np.cos(0.5 * g.coords()[..., 1]) + 0.1
    p = ParticleState([0.0, x, y], [1.0, vx, vy], 0.0, "coordinate_time", 1.0, 0.7)
    src = deposit_source(p, IdentityMap(3), KERNEL, g, Minkowski(2))
    lhs = float(np.sum(src.rho * phi) * g.cell_volume)
    rhs = 0.7 * math.sqrt(1 - vx * vx - vy * vy) * gather(g, KERNEL, phi, [x, y])[0]
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_deposit_escape_on_bounded_grid():
    g = line(boundary="reflecting")
    with pytest.raises(EscapeError):
        deposit_source(particle([9.99], [0.0]), IdentityMap(2), KERNEL, g, Minkowski(1))


# -- interpolation -----------------------------------------------------------

def test_interpolate_constant():
    g = line()
    s = FieldState(np.full(g.shape, 2.5), np.full(g.shape, -0.25), 0.0, g)
    phi, grad, pi = interpolate_field(s, [0.123], KERNEL)
    assert phi == pytest.approx(2.5, abs=1e-13)
    assert grad[0] == pytest.approx(0.0, abs=1e-12)
    assert pi == pytest.approx(-0.25, abs=1e-13)


@given(st.floats(-5, 5), st.floats(-3, 3), st.floats(-3, 3))
def test_interpolate_linear_exact(x, a, b):
    g = line(boundary="reflecting")
    s = FieldState(a * g.axes()[0] + b, np.zeros(g.shape), 0.0, g)
    phi, grad, _ = interpolate_field(s, [x], KERNEL)
    assert phi == pytest.approx(a * x + b, abs=1e-12)
    assert grad[0] == pytest.approx(a, abs=1e-12)


def test_interpolate_narrow_kernel_at_node_is_nodal():
    g = line()
    s = FieldState(np.cos(g.axes()[0]), np.zeros(g.shape), 0.0, g)
    x0 = float(g.axes()[0][17])
    phi, _, _ = interpolate_field(s, [x0], DeltaKernel("bspline_linear", 1.0))
    assert phi == pytest.approx(s.phi[17], abs=1e-15)


# -- stepping and energy -----------------------------------------------------

def test_zero_state_fixed_point():
    g = line()
    s = step_field(FieldState.zeros(g), None, 0.05, Minkowski(1), 1.0)
    assert not np.any(s.phi) and not np.any(s.pi)
    assert field_energy(s, Minkowski(1), 1.0) == 0.0


def test_constant_field_energy():
    g = line(L=8.0)
    s = FieldState(np.full(g.shape, 0.3), np.zeros(g.shape), 0.0, g)
    assert field_energy(s, Minkowski(1), 2.0, dt=0.01) == pytest.approx(0.5 * 4 * 0.09 * 8.0, rel=1e-13)


def test_free_energy_drift_long_run():
    g = line(n=128)
    G = Minkowski(1)
    x = g.axes()[0]
    phi = np.exp(-x ** 2)
    dt = 0.5 * float(g.spacing[0])
    op = KGOperator(g, G, 1.0)
    s = FieldState(phi, np.zeros(g.shape), 0.0, g)
    e0 = field_energy(s, G, 1.0, dt, op)
    for _ in range(10_000):
        s = step_field(s, None, dt, G, 1.0, op)
    assert abs(field_energy(s, G, 1.0, dt, op) - e0) / e0 < 1e-6


def _pulse_error(n):
    L, T = 20.0, 4.0
    g = line(n=n, L=L)
    G = Minkowski(1)
    x = g.axes()[0]
    h = float(g.spacing[0])
    steps = int(round(T / (0.5 * h)))
    dt = T / steps
    shape = lambda y: np.exp(-((y + L / 2) % L - L / 2) ** 2)
    s = FieldState(shape(x), (shape(x) - shape(x + dt)) / dt, 0.0, g)
    op = KGOperator(g, G, 0.0)
    for _ in range(steps):
        s = step_field(s, None, dt, G, 0.0, op)
    return math.sqrt(np.sum((s.phi - shape(x - T)) ** 2) * h)


def test_massless_pulse_translates_second_order():
    e1, e2 = _pulse_error(128), _pulse_error(256)
    assert e2 < 0.05
    assert math.log2(e1 / e2) == pytest.approx(2.0, abs=0.2)


def test_reversal_returns_initial_state():
    g = line(n=128)
    G = Minkowski(1)
    op = KGOperator(g, G, 1.0)
    phi0 = np.exp(-g.axes()[0] ** 2)
    dt = 0.5 * float(g.spacing[0])
    s = FieldState(phi0.copy(), np.zeros(g.shape), 0.0, g)
    steps = 200
    for _ in range(steps):
        s = step_field(s, None, dt, G, 1.0, op)
    for _ in range(steps):
        s = step_field(s, None, -dt, G, 1.0, op)
    assert np.max(np.abs(s.phi - phi0)) < 10 * dt * dt * steps


def test_stability_and_divergence_errors():
    g = line(n=64)
    s = FieldState(np.zeros(g.shape), np.zeros(g.shape), 0.0, g)
    with pytest.raises(StabilityError):
        step_field(s, None, 2.0 * float(g.spacing[0]), Minkowski(1), 1.0)
    bad = FieldState(np.full(g.shape, np.nan), np.zeros(g.shape), 0.0, g)
    with pytest.raises(DivergenceError):
        step_field(bad, None, 0.1, Minkowski(1), 1.0)


def test_sponge_absorbs_outgoing_pulse():
    g = line(n=256, L=20.0, boundary="sponge", sponge_width=6.0, sponge_damping=2.0)
    G = Minkowski(1)
    x = g.axes()[0]
    dt = 0.5 * float(g.spacing[0])
    op = KGOperator(g, G, 0.0)
    phi = np.exp(-x ** 2)
    s = FieldState(phi, (phi - np.exp(-(x + dt) ** 2)) / dt, 0.0, g)
    e0 = field_energy(s, G, 0.0, dt, op)
    for _ in range(int(30 / dt)):
        s = step_field(s, None, dt, G, 0.0, op)
    assert field_energy(s, G, 0.0, dt, op) < 1e-2 * e0


def test_curved_operator_is_self_adjoint():
    g = GridSpec(2, (8.0, 8.0), (32, 32), "periodic", (-4.0, -4.0))
    op = KGOperator(g, gaussian_well(2, 0.2, [0.0, 0.0], 1.0), 1.0)
    r = np.random.default_rng(0)
    u, v = r.normal(size=g.shape), r.normal(size=g.shape)
    assert np.sum(u * op.divergence_term(v)) == pytest.approx(np.sum(v * op.divergence_term(u)), rel=1e-12)
