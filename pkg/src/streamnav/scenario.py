"""Scenario configuration: strict JSON schema and world construction.

Configs are rejected on any unknown key, with the dotted path named, so
a typo cannot silently fall back to a default.  Every tunable that the
guidance, estimation, and control layers read lives here; the runner
takes (scenario, seed) and nothing else.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path as FilePath
from typing import Any

import numpy as np

from .errors import ConfigError, IoError
from .flow_elements import FloatArray
from . import world_sim

VARIANTS = (
    "vpm_a",
    "vpm_b",
    "vpm_mpc_hocbf_akf",
    "vpm_star_mpc_hocbf_akf",
    "vpm_star_mpc_akf",
    "vpm_star_mpc",
    "apf",
)
_MPC_VARIANTS = VARIANTS[2:6]
_AKF_VARIANTS = ("vpm_mpc_hocbf_akf", "vpm_star_mpc_hocbf_akf", "vpm_star_mpc_akf")
_XI_VARIANTS = ("vpm_b", "vpm_mpc_hocbf_akf")
_HOCBF_VARIANTS = ("vpm_mpc_hocbf_akf", "vpm_star_mpc_hocbf_akf")

SIM_DT = 0.01
CONTROL_DT = 0.05
SCAN_DT = 0.1
FIELD_DT = 1.0


def _require(raw: dict, key: str, path: str) -> Any:
    if key not in raw:
        raise ConfigError(f"missing required key {path}.{key}")
    return raw[key]


def _check_keys(raw: dict, allowed: set[str], path: str) -> None:
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}")


def _vec3(value: Any, path: str) -> FloatArray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == (2,):
        arr = np.r_[arr, 0.0]
    if arr.shape != (3,):
        raise ConfigError(f"{path} must be a 2- or 3-vector")
    return arr


@dataclass(frozen=True)
class FlowConfig:
    sink_strength: float = 25.0
    source_strength: float = 0.0
    uniform_speed: float = 0.0


@dataclass(frozen=True)
class VehicleConfig:
    u_max: float = 5.0
    kp: float = 4.0
    kd: float = 4.0


@dataclass(frozen=True)
class SurfaceConfig:
    mu: float = 0.3
    kappa: float = 0.0
    l_kutta: float = 0.8
    max_panels: int = 40


@dataclass(frozen=True)
class SafetyConfig:
    r_s: float = 0.5
    beta1: float = 4.0
    beta2: float = 4.0
    lambda0: float = 2.0


@dataclass(frozen=True)
class EstimatorConfig:
    alpha_min: float = 0.7
    alpha_max: float = 1.0
    rho: float = 1.5


@dataclass(frozen=True)
class MpcConfig:
    horizon: float = 5.0
    n_nodes: int = 25
    w_track: float = 8.0
    # w_track applies to the z row too unless this overrides it; flights
    # that may dodge vertically want the altitude pull softer than the
    # lateral tracking
    w_track_vertical: float | None = None
    w_vel: float = 2.0
    w_input: float = 0.4
    w_terminal: float = 12.0
    slack_weight: float = 1e5
    iterations: int = 3


@dataclass(frozen=True)
class PathConfig:
    type: str
    params: dict


@dataclass(frozen=True)
class ObstacleConfig:
    path: PathConfig
    radius: float
    kind: str = "cylinder"
    offsets: tuple = ((0.0, 0.0, 0.0),)
    spin_rate: float = 0.0


@dataclass(frozen=True)
class Scenario:
    name: str
    variant: str
    duration: float
    start: FloatArray
    goal: FloatArray
    dimension: int = 2
    v_max: float = 1.0
    goal_tolerance: float = 0.3
    carrot_gap: float = 1.5
    known_centers: bool = False
    phase_jitter: bool = False
    known_radius: float = 0.0
    xi: float = 0.0
    sensor_sigma: float = 0.01
    seeds: tuple = (0,)
    flow: FlowConfig = field(default_factory=FlowConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    obstacles: tuple = ()
    digest: str = ""

    @property
    def altitude(self) -> float:
        return float(self.start[2])


def _parse_section(raw: Any, cls, path: str):
    """Flat dataclass section from a dict, rejecting unknown keys."""
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be an object")
    names = {f for f in cls.__dataclass_fields__}
    _check_keys(raw, names, path)
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_PATH_KEYS = {
    "static": {"point"},
    "circle": {"center", "radius", "peak_speed", "phase"},
    "lemniscate": {"center", "half_width", "peak_speed", "phase"},
    "torus": {"center", "major_radius", "minor_radius", "windings", "peak_speed", "phase"},
    "lissajous": {"center", "amplitude", "peak_speed", "freqs", "phase"},
}


def _parse_path(raw: Any, path: str) -> PathConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be an object")
    kind = _require(raw, "type", path)
    if kind not in _PATH_KEYS:
        raise ConfigError(f"{path}.type: unknown path type {kind!r}")
    _check_keys(raw, _PATH_KEYS[kind] | {"type"}, path)
    params = {k: v for k, v in raw.items() if k != "type"}
    if kind == "static":
        _require(raw, "point", path)
    else:
        for key in ("center", "peak_speed"):
            _require(raw, key, path)
    return PathConfig(type=kind, params=params)


def _parse_obstacle(raw: Any, path: str) -> ObstacleConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be an object")
    _check_keys(raw, {"path", "radius", "kind", "offsets", "spin_rate"}, path)
    p = _parse_path(_require(raw, "path", path), f"{path}.path")
    radius = float(_require(raw, "radius", path))
    offsets = raw.get("offsets", [[0.0, 0.0, 0.0]])
    offs = np.atleast_2d(np.asarray(offsets, dtype=float))
    if offs.shape[1] == 2:
        offs = np.hstack([offs, np.zeros((len(offs), 1))])
    if offs.shape[1] != 3:
        raise ConfigError(f"{path}.offsets rows must be 2- or 3-vectors")
    return ObstacleConfig(
        path=p,
        radius=radius,
        kind=raw.get("kind", "cylinder"),
        offsets=tuple(map(tuple, offs)),
        spin_rate=float(raw.get("spin_rate", 0.0)),
    )


def parse_scenario(raw: dict) -> Scenario:
    top = {
        "schema", "name", "variant", "duration", "start", "goal", "dimension",
        "v_max", "goal_tolerance", "carrot_gap", "known_centers",
        "phase_jitter", "known_radius", "xi", "sensor_sigma", "seeds", "flow",
        "vehicle", "surface", "safety", "estimator", "mpc", "obstacles",
    }
    _check_keys(raw, top, "config")
    if int(raw.get("schema", 1)) != 1:
        raise ConfigError(f"config.schema: unsupported version {raw['schema']!r}")
    name = str(_require(raw, "name", "config"))
    variant = str(_require(raw, "variant", "config"))
    if variant not in VARIANTS:
        raise ConfigError(f"config.variant: unknown variant {variant!r}")
    duration = float(_require(raw, "duration", "config"))
    if duration <= 0.0:
        raise ConfigError("config.duration must be positive")
    start = _vec3(_require(raw, "start", "config"), "config.start")
    goal = _vec3(_require(raw, "goal", "config"), "config.goal")
    dimension = int(raw.get("dimension", 2))
    if dimension not in (2, 3):
        raise ConfigError("config.dimension must be 2 or 3")
    known_centers = bool(raw.get("known_centers", False))
    if known_centers and variant not in _MPC_VARIANTS:
        raise ConfigError("config.known_centers requires an MPC variant")
    if variant in _XI_VARIANTS and "xi" not in raw:
        raise ConfigError(f"config.xi is required for variant {variant!r}")
    xi = float(raw.get("xi", 0.0))
    if variant in _XI_VARIANTS and not 0.0 < abs(xi) < 1.0:
        raise ConfigError("config.xi magnitude must lie strictly inside (0, 1)")
    obstacles = tuple(
        _parse_obstacle(o, f"config.obstacles[{i}]")
        for i, o in enumerate(raw.get("obstacles", []))
    )
    if known_centers and float(raw.get("known_radius", 0.0)) <= 0.0:
        raise ConfigError("config.known_radius must be positive with known_centers")
    seeds_raw = raw.get("seeds", [0])
    if not isinstance(seeds_raw, (list, tuple)) or not seeds_raw:
        raise ConfigError("config.seeds must be a nonempty list of integers")
    scenario = Scenario(
        name=name,
        variant=variant,
        duration=duration,
        start=start,
        goal=goal,
        dimension=dimension,
        v_max=float(raw.get("v_max", 1.0)),
        goal_tolerance=float(raw.get("goal_tolerance", 0.3)),
        carrot_gap=float(raw.get("carrot_gap", 1.5)),
        known_centers=known_centers,
        phase_jitter=bool(raw.get("phase_jitter", False)),
        known_radius=float(raw.get("known_radius", 0.0)),
        xi=xi,
        sensor_sigma=float(raw.get("sensor_sigma", 0.01)),
        seeds=tuple(int(s) for s in seeds_raw),
        flow=_parse_section(raw.get("flow"), FlowConfig, "config.flow"),
        vehicle=_parse_section(raw.get("vehicle"), VehicleConfig, "config.vehicle"),
        surface=_parse_section(raw.get("surface"), SurfaceConfig, "config.surface"),
        safety=_parse_section(raw.get("safety"), SafetyConfig, "config.safety"),
        estimator=_parse_section(raw.get("estimator"), EstimatorConfig, "config.estimator"),
        mpc=_parse_section(raw.get("mpc"), MpcConfig, "config.mpc"),
        obstacles=obstacles,
        digest="",
    )
    canonical = json.dumps(
        serialize_scenario(scenario), sort_keys=True, separators=(",", ":")
    )
    return replace(scenario, digest=hashlib.sha256(canonical.encode()).hexdigest()[:16])


def serialize_scenario(scenario: Scenario) -> dict:
    """Canonical raw form: parse(serialize(s)) equals s, digest included.

    The digest is taken over this form rather than the file text, so two
    spellings of the same config (int vs float literals, key order) bind
    to the same record lineage once parsed.
    """

    def section(obj: Any) -> dict:
        return {name: getattr(obj, name) for name in obj.__dataclass_fields__}

    return {
        "schema": 1,
        "name": scenario.name,
        "variant": scenario.variant,
        "duration": scenario.duration,
        "start": [float(v) for v in scenario.start],
        "goal": [float(v) for v in scenario.goal],
        "dimension": scenario.dimension,
        "v_max": scenario.v_max,
        "goal_tolerance": scenario.goal_tolerance,
        "carrot_gap": scenario.carrot_gap,
        "known_centers": scenario.known_centers,
        "phase_jitter": scenario.phase_jitter,
        "known_radius": scenario.known_radius,
        "xi": scenario.xi,
        "sensor_sigma": scenario.sensor_sigma,
        "seeds": list(scenario.seeds),
        "flow": section(scenario.flow),
        "vehicle": section(scenario.vehicle),
        "surface": section(scenario.surface),
        "safety": section(scenario.safety),
        "estimator": section(scenario.estimator),
        "mpc": section(scenario.mpc),
        "obstacles": [
            {
                "path": {"type": o.path.type, **o.path.params},
                "radius": o.radius,
                "kind": o.kind,
                "offsets": [list(row) for row in o.offsets],
                "spin_rate": o.spin_rate,
            }
            for o in scenario.obstacles
        ],
    }


def load_scenario(path: str | FilePath) -> Scenario:
    try:
        text = FilePath(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return parse_scenario(raw)


def _build_path(cfg: PathConfig, jitter: float) -> world_sim.Path:
    params = dict(cfg.params)
    if cfg.type != "static":
        params["phase"] = float(params.get("phase", 0.0)) + jitter
    if cfg.type == "static":
        return world_sim.StaticPath(params["point"])
    if cfg.type == "circle":
        return world_sim.CirclePath(**params)
    if cfg.type == "lemniscate":
        return world_sim.LemniscatePath(**params)
    if cfg.type == "torus":
        return world_sim.TorusPath(**params)
    return world_sim.LissajousPath(**params)


def build_world(scenario: Scenario, seed: int) -> world_sim.World:
    """Instantiate obstacle motion; the seed only enters through jitter."""
    rng = np.random.default_rng(seed)
    groups = []
    for cfg in scenario.obstacles:
        jitter = float(rng.uniform(0.0, 2.0 * math.pi)) if scenario.phase_jitter else 0.0
        groups.append(
            world_sim.ObstacleGroup(
                path=_build_path(cfg.path, jitter),
                radius=cfg.radius,
                offsets=np.asarray(cfg.offsets, dtype=float),
                spin_rate=cfg.spin_rate,
                kind=cfg.kind,
            )
        )
    return world_sim.World(groups=groups, sensor_sigma=scenario.sensor_sigma)
