"""Run directory serialization: grid snapshots, CSV tables and the checksum manifest.

Grid snapshot layout (``.grid``): ASCII header lines ``key value...``
terminated by a line ``end``, followed by the field values as row-major
little-endian IEEE-754 float64.
"""
from __future__ import annotations

import csv
import hashlib
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError

GRID_MAGIC = "mesic-grid 1"
FLOAT_FMT = "%.17g"


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return FLOAT_FMT % float(x)


def write_grid(path, values: np.ndarray, extents: Sequence[float], origin: Sequence[float], time: float,
               field: str):
    values = np.ascontiguousarray(values, dtype="<f8")
    header = [
        GRID_MAGIC,
        "dims " + " ".join(str(n) for n in values.shape),
        "extents " + " ".join(fmt(e) for e in extents),
        "origin " + " ".join(fmt(o) for o in origin),
        f"time {fmt(time)}",
        f"field {field}",
        "end",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(values.tobytes(order="C"))


def read_grid(path):
    """Return ``(values, meta)`` with ``meta`` holding dims, extents, origin, time and field."""
    raw = Path(path).read_bytes()
    meta = {}
    pos = 0
    first = True
    while True:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if first:
            if line != GRID_MAGIC:
                raise ConfigError(f"{path}: not a grid snapshot")
            first = False
            continue
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        meta[key] = rest
    dims = tuple(int(v) for v in meta["dims"].split())
    out = {
        "dims": dims,
        "extents": [float(v) for v in meta["extents"].split()],
        "origin": [float(v) for v in meta["origin"].split()],
        "time": float(meta["time"]),
        "field": meta["field"],
    }
    values = np.frombuffer(raw, dtype="<f8", offset=pos)
    if values.size != int(np.prod(dims)):
        raise ConfigError(f"{path}: payload size does not match the header")
    return values.reshape(dims).astype(float), out


def write_csv(path, rows: Iterable[dict], columns: Optional[Sequence[str]] = None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def _cell(v: str):
    if v == "":
        return None
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path):
    """Rows as dicts; numeric cells become floats, empty cells ``None``."""
    with open(path, newline="") as fh:
        return [{k: _cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_manifest(root: Path):
    root = Path(root)
    lines = []
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != "MANIFEST"):
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"{digest}  {p.relative_to(root).as_posix()}")
    (root / "MANIFEST").write_text("\n".join(lines) + "\n")


def verify_manifest(root: Path) -> list:
    """Relative paths whose checksum no longer matches."""
    root = Path(root)
    bad = []
    for line in (root / "MANIFEST").read_text().splitlines():
        digest, rel = line.split("  ", 1)
        p = root / rel
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != digest:
            bad.append(rel)
    return bad


def snapshot_indices(N: int, cadence: int) -> list:
    """Cadence points together with their two neighbours (for centered time differences)."""
    idx = set()
    for n in range(0, N + 1, cadence):
        idx.update(k for k in (n - 1, n, n + 1) if 0 <= k <= N)
    idx.update(k for k in (N - 1, N) if k >= 0)
    return sorted(idx)


def trajectory_rows(record) -> list:
    sc = record.scenario
    from .lagrangian import node_tangents
    from .particle import fiber_metric

    hist = record.particle
    tang = node_tangents(hist, fiber_metric(sc.G, sc.eta))
    rows = []
    for k in range(hist.lam.size):
        X = sc.eta.backward(hist.z[k])
        u = sc.eta.inv_jacobian(X) @ tang[k]
        speed = float(np.sqrt(tang[k] @ fiber_metric(sc.G, sc.eta).components(hist.z[k]) @ tang[k]))
        row = {"lambda": hist.lam[k], "t": X[0]}
        for i in range(sc.grid.d):
            row[f"x{i + 1}"] = X[i + 1]
        for i in range(sc.grid.d):
            row[f"v{i + 1}"] = u[i + 1] / u[0]
        row["speed"] = speed
        row["effective_mass"] = sc.m + sc.eps * float(record.phi_at_particle[k])
        rows.append(row)
    return rows


def write_run(record, out: Path, error: Optional[BaseException] = None):
    """Write ``config.resolved``, trajectory, snapshots, diagnostics and ``MANIFEST``."""
    from .config import dump_config

    sc = record.scenario
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(sc.cfg))
    if record.particle is not None:
        write_csv(out / "trajectory.csv", trajectory_rows(record))
    N = record.times.size - 1
    if sc.cfg.outputs.snapshots and N >= 1:
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for n in snapshot_indices(N, sc.cfg.outputs.cadence):
            t = float(record.times[n])
            write_grid(snap / f"t_{n:06d}.grid", record.phi[n], sc.grid.extents, sc.grid.origin, t, "phi")
            write_grid(snap / f"t_{n:06d}.phidot.grid", record.phi_t(n), sc.grid.extents, sc.grid.origin, t,
                       "phi_t")
    if record.diagnostics:
        write_csv(out / "diagnostics.csv", record.diagnostics)
    if error is not None:
        (out / "ERROR").write_text(f"{type(error).__name__}: {error}\n")
    elif (out / "ERROR").exists():
        (out / "ERROR").unlink()
    write_manifest(out)


def read_snapshots(run_dir: Path) -> dict:
    """``{index: (time, phi, phi_t)}`` for every snapshot in a run directory."""
    snap = Path(run_dir) / "snapshots"
    out = {}
    for p in sorted(snap.glob("t_*.grid")):
        if p.name.endswith(".phidot.grid"):
            continue
        idx = int(p.stem[2:])
        phi, meta = read_grid(p)
        phit, _ = read_grid(snap / f"t_{idx:06d}.phidot.grid")
        out[idx] = (meta["time"], phi, phit)
    return out


class StoredRun:
    """A run directory read back from disk.

    Offers the slice of the in-memory record interface that the SEM audits
    use: ``scenario``, ``phi[n]``, ``times[n]``, ``phi_t(n)``, ``particle``
    and ``phi_at_particle``. Field data exist only at the stored snapshot
    indices.
    """

    def __init__(self, scenario, snapshots: dict, particle=None, phi_at_particle=None):
        self.scenario = scenario
        self.times = {n: t for n, (t, _, _) in snapshots.items()}
        self.phi = {n: phi for n, (_, phi, _) in snapshots.items()}
        self._phit = {n: phit for n, (_, _, phit) in snapshots.items()}
        self.particle = particle
        self.phi_at_particle = phi_at_particle
        self.last_index = scenario.steps

    def phi_t(self, n: int) -> np.ndarray:
        return self._phit[n]


def load_run(run_dir) -> StoredRun:
    """Rebuild the scenario, snapshots and worldline of a run directory."""
    from .config import parse_config
    from .lagrangian import ParticleHistory
    from .simulate import build_scenario

    run_dir = Path(run_dir)
    if not (run_dir / "config.resolved").exists():
        raise ConfigError(f"{run_dir}: not a run directory (config.resolved missing)")
    sc = build_scenario(parse_config(run_dir / "config.resolved"))
    if not (run_dir / "snapshots").is_dir():
        raise ConfigError(f"{run_dir}: run has no snapshots")
    snaps = read_snapshots(run_dir)
    particle = phi_at = None
    traj = run_dir / "trajectory.csv"
    if sc.has_particle and traj.exists():
        rows = read_csv(traj)
        X = np.array([[r["t"]] + [r[f"x{i + 1}"] for i in range(sc.grid.d)] for r in rows])
        lam = np.array([r["lambda"] for r in rows])
        particle = ParticleHistory(lam, sc.eta.forward(X), sc.m, sc.eps)
        mass = np.array([r["effective_mass"] for r in rows])
        phi_at = (mass - sc.m) / sc.eps if sc.eps != 0 else np.zeros_like(mass)
    stored = StoredRun(sc, snaps, particle, phi_at)
    if (run_dir / "ERROR").exists() and snaps:
        stored.last_index = max(snaps)
    return stored
