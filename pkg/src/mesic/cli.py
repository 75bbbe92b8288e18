"""Command-line entry point.

Exit codes: 0 success, 1 a physics check or audit failed (or a solver
broke down), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import parse_config, resolve_config
from .errors import ConfigError, MesicError
from .io import fmt, load_run, write_csv

log = logging.getLogger("mesic")

EXIT_OK, EXIT_PHYSICS, EXIT_USAGE = 0, 1, 2

ETA_TOLERANCE = {"affine": 1e-6, "smooth": 1e-2}
DISPERSION_TOLERANCE = 0.01
ORDER_WINDOW = (1.8, 2.2)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(args):
    cfg = parse_config(args.config)
    if getattr(args, "threads", None) is not None:
        cfg = cfg.model_copy(update={"threads": args.threads})
    from .simulate import build_scenario

    return build_scenario(cfg)


def _out_dir(args, default: Optional[Path] = None) -> Optional[Path]:
    out = Path(args.out) if args.out else default
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(rows, columns, path: Optional[Path]):
    if path is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    else:
        write_csv(path, rows, columns)


def cmd_run(args) -> int:
    from .simulate import run

    sc = _load(args)
    out = _out_dir(args)
    rec = run(sc, out=out, progress=args.verbose)
    log.info("%s: %d steps, t = %.6g, output in %s", sc.name, rec.times.size - 1, rec.times[-1], out)
    return EXIT_OK


def cmd_audit_sem(args) -> int:
    from .sem import snapshot_audit

    stored = load_run(args.run)
    report = snapshot_audit(stored, tolerance=args.tolerance_override)
    out = _out_dir(args, Path(args.run))
    write_csv(out / "sem_divergence.csv", report["divergence"], ["time", "l2", "linf", "weak"])
    d = stored.scenario.grid.d
    write_csv(out / "conservation.csv", report["conservation"], ["time"] + [f"P{mu}" for mu in range(d + 1)])
    drift = ", ".join(f"P{mu} {v:.3e}" for mu, v in enumerate(report["drift"]))
    log.info("drift relative to |P0|: %s (tolerance %.3g)", drift, report["tolerance"])
    return EXIT_OK if report["passed"] else EXIT_PHYSICS


def cmd_derive_check(args) -> int:
    from .simulate import derive_check, run

    sc = _load(args)
    rec = run(sc)
    rows = derive_check(rec, perturb=args.perturb)
    tol = sc.cfg.oracle.tolerance if args.tolerance_override is None else args.tolerance_override
    for r in rows:
        r["passed"] = int(r["relative"] <= tol)
    out = _out_dir(args)
    _emit(rows, ["direction", "index", "derivative", "scale", "relative", "passed"],
          None if out is None else out / "residuals.csv")
    worst = max(r["relative"] for r in rows)
    log.info("%d variations, worst relative residual %.3e (tolerance %.3g)", len(rows), worst, tol)
    return EXIT_OK if worst <= tol else EXIT_PHYSICS


def cmd_dispersion(args) -> int:
    from .simulate import convergence_ladder, dispersion_study

    rows = dispersion_study(n=args.n)
    ladder = convergence_ladder()
    out = _out_dir(args)
    _emit(rows, ["k", "M", "omega", "expected", "relative_error"], None if out is None else out / "dispersion.csv")
    conv = [{"n": n, "error": e, "order": (ladder["orders"][i - 1] if i else None)}
            for i, (n, e) in enumerate(zip(ladder["n"], ladder["errors"]))]
    if out is not None:
        write_csv(out / "convergence.csv", conv, ["n", "error", "order"])
    ok = all(r["relative_error"] < DISPERSION_TOLERANCE for r in rows)
    ok &= all(ORDER_WINDOW[0] <= o <= ORDER_WINDOW[1] for o in ladder["orders"])
    log.info("worst frequency error %.3e, orders %s", max(r["relative_error"] for r in rows),
             " ".join(f"{o:.3f}" for o in ladder["orders"]))
    return EXIT_OK if ok else EXIT_PHYSICS


YUKAWA_SETUPS = {
    1: {"grid": {"d": 1, "extents": [40.0], "n": [800]}, "limit": 0.01, "outer": None, "inner_widths": 3.0},
    3: {"grid": {"d": 3, "extents": [16.0] * 3, "n": [64] * 3}, "limit": 0.05, "outer": 5.0, "inner_widths": 1.5},
}


def yukawa_scenario(d: int, M: float = 1.0, eps: float = 0.5):
    from .simulate import build_scenario

    setup = YUKAWA_SETUPS[d]
    cfg = resolve_config({"name": f"yukawa-{d}d", "physics": {"M": M, "m": 1.0, "eps": eps},
                          "grid": setup["grid"],
                          "particle": {"position": [0.0] * d, "velocity": [0.0] * d},
                          "time": {"duration": 1.0}})
    return build_scenario(cfg)


def yukawa_comparison(sc, inner_widths: float, outer: Optional[float]):
    """Compare nodes beyond ``inner_widths`` kernel widths (``width * h``) from the particle."""
    from .simulate import yukawa_check

    inner = inner_widths * sc.kernel.width * float(np.max(sc.grid.spacing))
    return yukawa_check(sc, inner, outer)


def cmd_yukawa(args) -> int:
    if args.config:
        sc = _load(args)
        d = sc.grid.d
        setup = dict(YUKAWA_SETUPS.get(d, YUKAWA_SETUPS[1]))
    else:
        d = args.dim
        sc = yukawa_scenario(d)
        setup = YUKAWA_SETUPS[d]
    res = yukawa_comparison(sc, setup["inner_widths"], setup["outer"])
    out = _out_dir(args)
    if out is not None:
        center = np.asarray(sc.cfg.particle.position, dtype=float)
        r = np.sqrt(np.sum((sc.grid.coords() - center) ** 2, axis=-1)).ravel()
        order = np.argsort(r, kind="stable")
        rows = [{"r": r[i], "phi": res["phi"].ravel()[i], "reference": res["reference"].ravel()[i]} for i in order]
        write_csv(out / "yukawa_profile.csv", rows, ["r", "phi", "reference"])
    log.info("static residual %.2e after %d iterations; worst node %.3e at r = %.3g; worst shell %.3e",
             res["residual"], res["iterations"], res["max_relative"], res["at_radius"], res["profile_max_relative"])
    return EXIT_OK if res["profile_max_relative"] < setup["limit"] else EXIT_PHYSICS


def cmd_eta_check(args) -> int:
    from .geometry import AffineMap, SinusoidalMap
    from .simulate import eta_invariance_test

    sc = _load(args)
    d = sc.grid.d
    if args.against == "affine":
        other = AffineMap(np.diag([1.0, 2.0] + [1.0] * (d - 1)), np.full(d + 1, 0.25))
    else:
        other = SinusoidalMap([0.05 * L for L in sc.grid.extents], [2 * np.pi / L for L in sc.grid.extents])
    res = eta_invariance_test(sc, sc.eta, other)
    row = {"against": args.against, "trajectory": res["trajectory"], "action": res["action"],
           "action_relative": res["action_relative"]}
    out = _out_dir(args)
    _emit([row], list(row), None if out is None else out / "eta_check.csv")
    limit = ETA_TOLERANCE[args.against] if args.tolerance_override is None else args.tolerance_override
    worst = max(res["trajectory"], res["action_relative"])
    return EXIT_OK if worst < limit else EXIT_PHYSICS


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mesic", description="Klein-Gordon field coupled to a scalar-charged particle.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, config=True, out_help="output directory"):
        if config:
            sp.add_argument("--config", required=True, help="scenario configuration (YAML)")
            sp.add_argument("--threads", type=int, default=None, help="worker threads (default from config)")
        sp.add_argument("--out", default=None, help=out_help)

    sp = sub.add_parser("run", help="integrate a scenario and write a run directory")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("audit-sem", help="divergence and conservation audits of a run directory")
    sp.add_argument("--run", required=True, help="run directory written by 'run'")
    sp.add_argument("--tolerance-override", type=float, default=None, help="drift tolerance")
    common(sp, config=False, out_help="where to write the CSVs (default: the run directory)")
    sp.set_defaults(func=cmd_audit_sem)

    sp = sub.add_parser("derive-check", help="variational residuals of an integrated scenario")
    common(sp, out_help="directory for residuals.csv (default: stdout)")
    sp.add_argument("--perturb", action="store_true", help="displace the trajectory off shell first")
    sp.add_argument("--tolerance-override", type=float, default=None, help="residual tolerance")
    sp.set_defaults(func=cmd_derive_check)

    sp = sub.add_parser("dispersion", help="free-field dispersion and convergence study")
    sp.add_argument("--n", type=int, default=512, help="grid points for the dispersion runs")
    common(sp, config=False, out_help="directory for dispersion.csv and convergence.csv (default: stdout)")
    sp.set_defaults(func=cmd_dispersion)

    sp = sub.add_parser("yukawa", help="static field of a pinned particle against the analytic profile")
    sp.add_argument("--dim", type=int, choices=(1, 3), default=1)
    sp.add_argument("--config", default=None, help="scenario to solve instead of the builtin setup")
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", default=None, help="directory for yukawa_profile.csv")
    sp.set_defaults(func=cmd_yukawa)

    sp = sub.add_parser("eta-check", help="compare a run under two covariance maps")
    common(sp, out_help="directory for eta_check.csv (default: stdout)")
    sp.add_argument("--against", choices=("affine", "smooth"), default="affine")
    sp.add_argument("--tolerance-override", type=float, default=None, help="deviation tolerance")
    sp.set_defaults(func=cmd_eta_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except MesicError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_PHYSICS


if __name__ == "__main__":
    sys.exit(main())
