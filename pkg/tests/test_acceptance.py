"""Acceptance criteria, one PASS/FAIL line each (printed in the terminal summary).

Run with ``pytest tests/test_acceptance.py``; add ``-s`` to also see the
lines as each criterion finishes.
"""
import time
from contextlib import contextmanager

import numpy as np
import pytest

from mesic.cli import YUKAWA_SETUPS, yukawa_comparison, yukawa_scenario
from mesic.config import builtin
from mesic.geometry import AffineMap, DeltaKernel, IdentityMap, LambdaMeasure, SinusoidalMap, density_transform_check
from mesic.lagrangian import action_dense_5d, meson_action_terms
from mesic.particle import ParticleState
from mesic.sem import conservation_audit, sem_at, sem_aux, theta_from_state
from mesic.simulate import (build_scenario, convergence_ladder, derive_check, dispersion_study, divergence_ladder,
                            eta_invariance_test, run)


class Report:
    def __init__(self):
        self.entries = {}

    def add(self, number, title, passed, info=()):
        entry = self.entries.setdefault(number, {"title": title, "passed": True, "info": []})
        entry["passed"] &= bool(passed)
        entry["info"].extend(info)
        status = "PASS" if passed else "FAIL"
        print(f"\ncriterion {number} {status}: {title}")
        for line in info:
            print(f"    {line}")

    def lines(self):
        out = []
        for number in sorted(self.entries):
            e = self.entries[number]
            out.append(f"criterion {number} {'PASS' if e['passed'] else 'FAIL'}: {e['title']}")
            out.extend(f"    {line}" for line in e["info"])
        return out


ACCEPTANCE_REPORT = Report()


@contextmanager
def stopwatch(out):
    start = time.perf_counter()
    yield
    out.append(time.perf_counter() - start)


def test_criterion_1_variational_oracle(runs):
    info, ok, clock = [], True, []
    with stopwatch(clock):
        for name in ("free-field-1d", "free-particle", "coupled-1d"):
            on = max(r["relative"] for r in derive_check(runs(name)))
            off = max(r["relative"] for r in derive_check(runs(name), perturb=True))
            ok &= on <= 1e-6 and off >= 1e-4
            info.append(f"{name}: worst on-shell residual {on:.2e} (limit 1e-6), perturbed {off:.2e} (needs >= 1e-4)")
    ok &= clock[0] < 60
    info.append(f"runtime {clock[0]:.1f} s (budget 60 s, builtin runs cached by the session)")
    ACCEPTANCE_REPORT.add(1, "variational oracle on the three builtin scenarios", ok, info)
    assert ok


def test_criterion_2_dispersion():
    clock = []
    with stopwatch(clock):
        rows = dispersion_study(n=512)
        ladder = convergence_ladder()
    worst = max(r["relative_error"] for r in rows)
    orders = ladder["orders"]
    ok = worst < 0.01 and all(1.8 <= o <= 2.2 for o in orders) and clock[0] < 30
    info = [f"worst frequency error {worst:.2e} over k in (1, 2, 4) x 2 pi / L, M in (0, 1) (limit 1e-2)",
            "convergence orders " + ", ".join(f"{o:.3f}" for o in orders) + " (window [1.8, 2.2])",
            f"runtime {clock[0]:.1f} s (budget 30 s)"]
    ACCEPTANCE_REPORT.add(2, "free-field dispersion and spatial convergence", ok, info)
    assert ok


def test_criterion_3_yukawa_limit():
    clock = []
    with stopwatch(clock):
        one = yukawa_comparison(yukawa_scenario(1), YUKAWA_SETUPS[1]["inner_widths"], None)
        three = yukawa_comparison(yukawa_scenario(3), YUKAWA_SETUPS[3]["inner_widths"], YUKAWA_SETUPS[3]["outer"])
    ok = one["max_relative"] < 0.01 and three["profile_max_relative"] < 0.05 and clock[0] < 300
    info = [f"1D: worst node {one['max_relative']:.2e} beyond 3 kernel widths (limit 1e-2), CG residual {one['residual']:.1e}",
            f"3D 64^3: worst radial shell beyond 1.5 kernel widths {three['profile_max_relative']:.2e} (limit 5e-2), CG residual {three['residual']:.1e}",
            f"3D single-node worst {three['max_relative']:.2e} at r = {three['at_radius']:.3g} "
            "(lattice anisotropy of the 7-point Laplacian next to the source)",
            f"runtime {clock[0]:.1f} s (budget 300 s)"]
    ACCEPTANCE_REPORT.add(3, "static Yukawa profile in 1D and 3D", ok, info)
    assert ok


def test_criterion_4_minkowski_tensor(runs):
    sc = build_scenario(builtin("free-particle"))
    p = ParticleState(np.array([0.0, -3.0]), np.array([1.0, 0.6]), 0.0, "coordinate_time", 1.0, 0.0)
    th = theta_from_state(p, sc.eta, sc.kernel, sc.grid, sc.G).sum(axis=0) * sc.grid.cell_volume
    ok = abs(th[0, 0] - 1.25) < 1e-4 and abs(th[0, 1] - 0.75) < 1e-4
    rec = runs("coupled-1d")
    N = rec.times.size - 1
    exact = sym = True
    for n in np.linspace(0, N, 9).astype(int):
        s = sem_at(rec, int(n))
        weight = rec.scenario.m + rec.scenario.eps * rec.phi[n]
        exact &= bool(np.array_equal(s.T, s.t_can + weight[..., None, None] * s.theta))
        sym &= bool(np.array_equal(s.T, np.swapaxes(s.T, -1, -2)))
    ok &= exact and sym
    info = [f"free particle v = 0.6: cell sums {th[0, 0]:.12f}, {th[0, 1]:.12f} (expected 1.25, 0.75, tol 1e-4)",
            f"coupled-1d at 9 time nodes: assembly identity exact {exact}, tensor exactly symmetric {sym}"]
    ACCEPTANCE_REPORT.add(4, "Minkowski tensor totals, assembly and symmetry", ok, info)
    assert ok


def test_criterion_5_conservation(runs):
    coupled = conservation_audit(runs("coupled-1d"))
    free = conservation_audit(runs("free-field-1d"))
    ok = coupled["max_drift"] < 5e-3 and free["max_drift"] < 1e-6
    info = [f"coupled-1d global P drift {coupled['max_drift']:.2e} (limit 5e-3)",
            f"free-field-1d global P drift {free['max_drift']:.2e} (limit 1e-6)"]
    ACCEPTANCE_REPORT.add(5, "divergence-free tensor and global conservation", ok, info)
    assert ok


@pytest.mark.xfail(strict=True, reason="the pointwise normalized divergence of the regularized coupled system "
                                       "does not decrease under refinement with the kernel tied to the grid")
def test_criterion_5_divergence_order():
    clock = []
    with stopwatch(clock):
        ladder = divergence_ladder(builtin("coupled-1d"), factors=(1, 2, 4, 8))
    l2 = ladder["l2_order"]
    weak = ladder["weak_order"]
    ok = l2["fit"] >= 1.0 and clock[0] < 300
    info = ["pointwise normalized L2 ladder n = " + ", ".join(str(r["n"]) for r in ladder["rows"]) + ": "
            + ", ".join(f"{r['l2']:.3e}" for r in ladder["rows"]),
            "pointwise orders " + ", ".join(f"{o:.2f}" for o in l2["steps"]) + f", fitted {l2['fit']:.2f} (needs >= 1)",
            "mollified (weak) norm: " + ", ".join(f"{r['weak']:.3e}" for r in ladder["rows"])
            + ", orders " + ", ".join(f"{o:.2f}" for o in weak["steps"]) + f", fitted {weak['fit']:.2f}",
            f"runtime {clock[0]:.1f} s (budget 300 s)"]
    ACCEPTANCE_REPORT.add(5, "divergence order on a 4-rung refinement ladder", ok, info)
    assert ok


def test_criterion_6_concatenation(runs):
    rec = runs("coupled-1d")
    T = rec.scenario.cfg.time.duration
    values = {kind: rec.action(LambdaMeasure(kind, (0.0, T))).value for kind in ("uniform", "triangular", "bump")}
    spread = max(values.values()) - min(values.values())
    short = run(build_scenario(builtin("coupled-1d", grid={"n": [64]}, time={"duration": 1.0})))
    setup = short.scenario.action_setup()
    fh, ph = short.field_history(), short.particle
    dense = action_dense_5d(fh, ph, setup)
    terms = sum(meson_action_terms(fh, ph, setup).values())
    ok = spread <= 1e-8 and abs(dense - terms) <= 1e-10
    info = [f"coupled-1d action under uniform, triangular and bump suspension densities: spread {spread:.1e} (limit 1e-8)",
            f"dense 5D quadrature {dense:.15f} vs sum of the three uncoupled terms {terms:.15f}: "
            f"difference {abs(dense - terms):.1e} (limit 1e-10; n = 64, one time unit)"]
    ACCEPTANCE_REPORT.add(6, "concatenated action reduces to the uncoupled action", ok, info)
    assert ok


def test_criterion_7_covariance_invariance():
    sc = build_scenario(builtin("coupled-1d"))
    affine = eta_invariance_test(sc, IdentityMap(2), AffineMap(np.diag([1.0, 2.0]), [0.25, 0.25]))
    ok = affine["trajectory"] < 1e-6 and affine["action_relative"] < 1e-6
    devs = []
    for n in (128, 256, 512):
        smooth = eta_invariance_test(build_scenario(builtin("coupled-1d", grid={"n": [n]}, time={"duration": 4.0})),
                                     IdentityMap(2), SinusoidalMap([0.5], [2 * np.pi / 20.0]))
        devs.append(smooth["trajectory"])
    orders = [float(np.log2(devs[i] / devs[i + 1])) for i in range(2)]
    ok &= max(devs) < 0.01 and min(orders) >= 1.8
    k = DeltaKernel("bspline_cubic", 1.0)
    one = lambda y: np.ones(y.shape[:-1])
    z = np.array([0.4, 0.7])
    dens = max(density_transform_check(k, AffineMap(np.array([[1.0, 0.0], [0.3, 2.0]]), [0.1, 0.2]), one, z,
                                       [-1.0, -1.0], [1.5, 1.5], 0.2, n=800),
               density_transform_check(k, SinusoidalMap([0.2], [1.5]), one, z,
                                       [-1.0, -1.0], [1.5, 1.5], 0.2, n=800))
    ok &= dens <= 1e-6
    info = [f"affine map (det 2): trajectory deviation {affine['trajectory']:.1e}, "
            f"relative action deviation {affine['action_relative']:.1e} (limit 1e-6)",
            "smooth map, n = 128, 256, 512: deviation " + ", ".join(f"{d:.2e}" for d in devs)
            + ", orders " + ", ".join(f"{o:.2f}" for o in orders) + " (limit 1e-2, order >= 1.8)",
            f"delta quadrature under composed affine and sinusoidal maps: |integral - 1| = {dens:.1e} (limit 1e-6)"]
    ACCEPTANCE_REPORT.add(7, "covariance-map invariance", ok, info)
    assert ok


def test_criterion_8_auxiliary_components(runs):
    rec = runs("coupled-1d")
    sc = rec.scenario
    fh = rec.field_history()
    kg = meson_action_terms(fh, rec.particle, sc.action_setup())["kg"]
    worst = 0.0
    zero = True
    for kind in ("uniform", "triangular", "bump"):
        K = LambdaMeasure(kind, (0.0, sc.cfg.time.duration))
        for lam in np.linspace(0.5, sc.cfg.time.duration - 0.5, 7):
            aux = sem_aux(fh, sc.G, sc.M, K, float(lam))
            zero &= not aux.T4nu.any() and not aux.Tmu4.any()
            expected = float(K.k_density(lam)) * kg
            worst = max(worst, abs(aux.T44 - expected) / max(abs(expected), 1e-300))
    ok = zero and worst <= 1e-10
    info = [f"mixed fifth-axis components identically zero: {zero}",
            f"T44 against the suspended Klein-Gordon action quadrature: worst relative difference {worst:.1e} (limit 1e-10)"]
    ACCEPTANCE_REPORT.add(8, "auxiliary fifth-axis components", ok, info)
    assert ok
