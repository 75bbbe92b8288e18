"""Scenario configuration: schema, builtin scenarios, parsing and serialization.

A configuration file is YAML. It may name a builtin ``scenario`` whose
settings are deep-merged underneath the file's own keys. Unknown keys are
rejected everywhere.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import CFLError, ConfigError

CFL_LIMIT = 0.9


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhysicsCfg(_Strict):
    M: float = Field(1.0, ge=0)
    m: float = Field(1.0, ge=0)
    eps: float = 0.0


class GridCfg(_Strict):
    d: Literal[1, 2, 3] = 1
    extents: List[float] = [20.0]
    n: List[int] = [256]
    origin: Optional[List[float]] = None
    boundary: Literal["periodic", "reflecting", "sponge"] = "periodic"
    sponge_width: float = 0.0
    sponge_damping: float = 0.0

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.extents) != self.d or len(self.n) != self.d:
            raise ValueError("grid.extents and grid.n need one entry per spatial axis")
        if self.origin is not None and len(self.origin) != self.d:
            raise ValueError("grid.origin needs one entry per spatial axis")
        return self


class MetricCfg(_Strict):
    kind: Literal["minkowski", "gaussian_well"] = "minkowski"
    depth: float = 0.1
    center: Optional[List[float]] = None
    width: float = 1.0


class EtaCfg(_Strict):
    kind: Literal["identity", "affine", "smooth"] = "identity"
    matrix: Optional[List[List[float]]] = None
    offset: Optional[List[float]] = None
    amplitude: Optional[List[float]] = None
    wavenumber: Optional[List[float]] = None
    phase: Optional[List[float]] = None


class KernelCfg(_Strict):
    shape: Literal["gaussian", "bspline_quadratic", "bspline_cubic", "bspline_linear"] = "bspline_quadratic"
    width: float = Field(1.0, gt=0)


class ParticleCfg(_Strict):
    enabled: bool = True
    position: List[float] = [0.0]
    velocity: List[float] = [0.0]
    gauge: Literal["proper_time", "coordinate_time"] = "coordinate_time"


class PulseCfg(_Strict):
    amplitude: float = 0.1
    center: List[float] = [0.0]
    width: float = 1.0
    direction: Literal[-1, 0, 1] = 1


class ModeCfg(_Strict):
    index: List[int] = [1]
    amplitude: float = 0.1
    direction: Literal[-1, 0, 1] = 1


class RandomPulsesCfg(_Strict):
    count: int = Field(0, ge=0)
    amplitude: float = 0.05
    width: float = 1.0
    generator: Literal["pcg64"] = "pcg64"


class InitialCfg(_Strict):
    self_field: bool = False
    pulses: List[PulseCfg] = []
    modes: List[ModeCfg] = []
    random: RandomPulsesCfg = RandomPulsesCfg()


class TimeCfg(_Strict):
    duration: float = Field(10.0, gt=0)
    cfl: float = Field(0.5, gt=0)
    dt: Optional[float] = None


class LambdaCfg(_Strict):
    kind: Literal["uniform", "triangular", "bump", "tabulated"] = "uniform"
    domain: Optional[List[float]] = None
    center: Optional[float] = None
    halfwidth: Optional[float] = None
    points: Optional[List[float]] = None
    values: Optional[List[float]] = None


class OutputsCfg(_Strict):
    cadence: int = Field(10, ge=1)
    snapshots: bool = True
    probes: List[List[float]] = []


class AuditCfg(_Strict):
    drift_tolerance: float = 5e-3
    divergence_tolerance: float = 1.0
    mollifier_width: float = 1.0


class OracleCfg(_Strict):
    tolerance: float = 1e-6
    step_scale: float = 1e-5
    field_nodes: int = Field(16, ge=1)
    particle_nodes: int = Field(8, ge=0)
    perturbation: float = 1e-2
    detection: float = 1e-4


class ScenarioCfg(_Strict):
    name: str = "custom"
    scenario: Optional[str] = None
    physics: PhysicsCfg = PhysicsCfg()
    grid: GridCfg = GridCfg()
    metric: MetricCfg = MetricCfg()
    eta: EtaCfg = EtaCfg()
    kernel: KernelCfg = KernelCfg()
    particle: ParticleCfg = ParticleCfg()
    initial: InitialCfg = InitialCfg()
    time: TimeCfg = TimeCfg()
    lambda_measure: LambdaCfg = LambdaCfg()
    outputs: OutputsCfg = OutputsCfg()
    audit: AuditCfg = AuditCfg()
    oracle: OracleCfg = OracleCfg()
    threads: int = Field(1, ge=1)
    seed: int = 0


BUILTINS = {
    "free-field-1d": {
        "name": "free-field-1d",
        "physics": {"M": 1.0, "m": 0.0, "eps": 0.0},
        "grid": {"d": 1, "extents": [20.0], "n": [256], "origin": [-10.0]},
        "particle": {"enabled": False},
        "initial": {"pulses": [{"amplitude": 0.5, "center": [-3.0], "width": 1.0, "direction": 1}]},
        "time": {"duration": 10.0, "cfl": 0.5},
        "audit": {"drift_tolerance": 1e-6},
    },
    "free-particle": {
        "name": "free-particle",
        "physics": {"M": 1.0, "m": 1.0, "eps": 0.0},
        "grid": {"d": 1, "extents": [20.0], "n": [128], "origin": [-10.0]},
        "particle": {"position": [-3.0], "velocity": [0.6]},
        "time": {"duration": 8.0, "cfl": 0.5},
        "audit": {"drift_tolerance": 1e-10},
    },
    "coupled-1d": {
        "name": "coupled-1d",
        "physics": {"M": 1.0, "m": 1.0, "eps": 0.5},
        "grid": {"d": 1, "extents": [20.0], "n": [256], "origin": [-10.0]},
        "kernel": {"shape": "bspline_quadratic", "width": 3.0},
        "particle": {"position": [0.0], "velocity": [0.05]},
        "initial": {"self_field": True,
                    "pulses": [{"amplitude": 0.3, "center": [-5.0], "width": 1.0, "direction": 1}]},
        "time": {"duration": 16.0, "cfl": 0.5},
        "audit": {"drift_tolerance": 5e-3},
    },
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid configuration: " + "; ".join(lines)


def resolve_config(data: Optional[dict]) -> ScenarioCfg:
    """Validate a raw mapping, merging a named builtin underneath it."""
    data = dict(data or {})
    name = data.get("scenario")
    if name is not None:
        if name not in BUILTINS:
            raise ConfigError(f"scenario: unknown builtin {name!r} (known: {', '.join(sorted(BUILTINS))})")
        data = _deep_merge(BUILTINS[name], data)
    try:
        cfg = ScenarioCfg.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    return finalize_time(cfg)


def builtin(name: str, **overrides) -> ScenarioCfg:
    return resolve_config(_deep_merge({"scenario": name}, overrides))


def spacing(cfg: ScenarioCfg):
    return [e / n for e, n in zip(cfg.grid.extents, cfg.grid.n)]


def max_wave_speed(cfg: ScenarioCfg) -> float:
    if cfg.metric.kind == "minkowski":
        return 1.0
    # the Gaussian well has speed sqrt((1+2U)/(1-2U)) <= 1 for U <= 0
    return 1.0


def finalize_time(cfg: ScenarioCfg) -> ScenarioCfg:
    """Fix ``dt`` so the duration is an integral number of stable steps."""
    h = min(spacing(cfg))
    bound = CFL_LIMIT * h / (math.sqrt(cfg.grid.d) * max_wave_speed(cfg))
    T = cfg.time.duration
    if cfg.time.dt is None:
        target = cfg.time.cfl * h / (math.sqrt(cfg.grid.d) * max_wave_speed(cfg))
        if target > bound:
            raise CFLError(f"time.cfl={cfg.time.cfl} exceeds the stability limit {CFL_LIMIT}")
        steps = max(1, math.ceil(T / target - 1e-9))
        dt = T / steps
    else:
        dt = cfg.time.dt
        if dt > bound * (1 + 1e-12):
            raise CFLError(f"time.dt={dt} violates the stability bound dt <= {bound:.6g}")
        steps = T / dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"time.duration={T} is not an integral multiple of time.dt={dt}")
    new = cfg.model_copy(deep=True)
    new.time.dt = float(dt)
    if cfg.lambda_measure.domain is None:
        new.lambda_measure.domain = [0.0, float(T)]
    return new


def n_steps(cfg: ScenarioCfg) -> int:
    return int(round(cfg.time.duration / cfg.time.dt))


def parse_config(path) -> ScenarioCfg:
    """Read, merge, validate and resolve a configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: parse error at {where}: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = resolve_config(data)
    from .simulate import validate_scenario

    validate_scenario(cfg)
    return cfg


def dump_config(cfg: ScenarioCfg) -> str:
    """Serialize a resolved configuration; parsing the result gives it back.

    The builtin name is kept as a label: every key is spelled out, so merging
    the builtin underneath again changes nothing.
    """
    data = cfg.model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=None)
