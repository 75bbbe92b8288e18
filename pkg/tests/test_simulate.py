import hashlib

import numpy as np
import pytest

from mesic.config import builtin, resolve_config
from mesic.errors import ConfigError
from mesic.geometry import AffineMap, IdentityMap, SinusoidalMap
from mesic.simulate import (build_scenario, convergence_ladder, dispersion_study, eta_invariance_test,
                            initial_field, run, solve_static_yukawa, yukawa_check, yukawa_reference)


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_runs_are_byte_identical(tmp_path):
    cfg = builtin("coupled-1d", time={"duration": 1.0}, initial={"random": {"count": 3}})
    for name in ("a", "b"):
        run(build_scenario(cfg), out=tmp_path / name)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_random_pulses_follow_seed():
    cfg = lambda seed: build_scenario(resolve_config({
        "grid": {"d": 1, "extents": [20.0], "n": [64]}, "particle": {"enabled": False},
        "initial": {"random": {"count": 4}}, "seed": seed}))
    a, b, c = (initial_field(cfg(s))[0] for s in (7, 7, 8))
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)


def test_free_particle_moves_straight(runs):
    X = runs("free-particle").physical_trajectory()
    np.testing.assert_allclose(X[:, 1], -3.0 + 0.6 * X[:, 0], atol=1e-12)
    assert X[-1, 0] == pytest.approx(8.0)


def test_uncoupled_particle_leaves_field_alone(runs):
    assert not np.any(runs("free-particle").phi)


def test_coupled_run_energy_exchange(runs):
    rec = runs("coupled-1d")
    energies = np.array([[r["field_energy"], r["particle_energy"]] for r in rec.diagnostics])
    assert np.ptp(energies[:, 1]) > 1e-4
    total = np.array([r["P0"] for r in rec.diagnostics])
    assert np.ptp(total) / abs(total[0]) < 5e-3


# -- static limit ------------------------------------------------------------

def _static(d, eps, n, L):
    return build_scenario(resolve_config({
        "physics": {"M": 1.0, "m": 1.0, "eps": eps},
        "grid": {"d": d, "extents": [L] * d, "n": [n] * d},
        "particle": {"position": [0.0] * d, "velocity": [0.0] * d}, "time": {"duration": 1.0}}))


def test_uncharged_particle_has_no_static_field():
    state, info = solve_static_yukawa(_static(1, 0.0, 128, 20.0))
    assert not np.any(state.phi) and info["iterations"] == 0


def test_one_dimensional_yukawa_profile():
    sc = _static(1, 0.5, 800, 40.0)
    res = yukawa_check(sc, inner=3 * 1.5 * 0.05)
    assert res["residual"] < 1e-9
    assert res["max_relative"] < 0.01


def test_reference_is_periodic_image_sum():
    sc = _static(1, 0.5, 64, 6.0)
    ref = yukawa_reference(sc.grid, [0.0], 0.5, 1.0)
    x = sc.grid.coords()[..., 0]
    # closed form of the periodic 1D Green function
    L = 6.0
    closed = -(0.5 / 2) * np.cosh(L / 2 - np.abs(x)) / np.sinh(L / 2)
    np.testing.assert_allclose(ref, closed, rtol=1e-12)
    with pytest.raises(ConfigError):
        yukawa_reference(build_scenario(resolve_config({"grid": {"d": 2, "extents": [4.0, 4.0], "n": [8, 8]},
                                                        "particle": {"position": [0, 0], "velocity": [0, 0]}})).grid,
                         [0.0, 0.0], 0.5, 1.0)


# -- covariance invariance ---------------------------------------------------

def _short_coupled():
    return build_scenario(builtin("coupled-1d", time={"duration": 4.0}))


def test_identity_against_identity():
    res = eta_invariance_test(_short_coupled(), IdentityMap(2), IdentityMap(2))
    assert res["trajectory"] == 0.0 and res["action"] == 0.0


def test_affine_map_invariance():
    res = eta_invariance_test(_short_coupled(), IdentityMap(2), AffineMap(np.diag([1.0, 2.0]), [0.25, 0.25]))
    assert res["trajectory"] < 1e-6
    assert res["action_relative"] < 1e-6


def test_smooth_map_invariance_converges():
    devs = []
    for n in (128, 256):
        sc = build_scenario(builtin("coupled-1d", grid={"n": [n]}, time={"duration": 4.0}))
        res = eta_invariance_test(sc, IdentityMap(2), SinusoidalMap([0.5], [2 * np.pi / 20.0]))
        devs.append(res["trajectory"])
    assert devs[0] < 1e-2
    assert devs[1] < devs[0]


def test_coupled_run_rejects_time_mixing_map():
    cfg = builtin("coupled-1d", eta={"kind": "affine", "matrix": [[1.0, 0.1], [0.0, 1.0]]})
    with pytest.raises(ConfigError):
        build_scenario(cfg)


# -- free-field numerics -----------------------------------------------------

def test_dispersion_relation():
    rows = dispersion_study(n=256, duration=60.0)
    assert max(r["relative_error"] for r in rows) < 0.01


def test_leapfrog_second_order():
    orders = convergence_ladder()["orders"]
    assert all(1.8 <= o <= 2.2 for o in orders)
