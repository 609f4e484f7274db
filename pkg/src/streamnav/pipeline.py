"""Closed-loop runner: one (scenario, seed) pair in, one run record out.

Timing is fixed: physics at 100 Hz, control at 20 Hz, scans at 10 Hz,
guidance-field refresh at 1 Hz.  All randomness flows from the seed, and
records serialize to canonical JSON, so re-running a pair reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Any

import numpy as np

from . import guidance, panel_solver, safety_mpc, virtual_surface, world_sim
from .errors import StreamnavError
from .flow_elements import FloatArray, PointSource, UniformFlow, attack_angle
from .obstacle_estimation import AdaptiveFilter, TrackTable, fit_mbe, predict_horizon
from .scenario import (
    CONTROL_DT,
    FIELD_DT,
    SCAN_DT,
    SIM_DT,
    Scenario,
    build_world,
)

_STEPS_PER_TICK = round(CONTROL_DT / SIM_DT)
_TICKS_PER_SCAN = round(SCAN_DT / CONTROL_DT)
_TICKS_PER_FIELD = round(FIELD_DT / CONTROL_DT)
_TRACK_GATE_SPEED = 3.5
_CLUSTER_MIN_GAP = 0.25
_PRUNE_MARGIN = 0.5
_SIDE_FREEZE_RANGE = 2.5
_ENCOUNTER_JUMP = 2.0
_MATURE_HITS = 8


@dataclass
class RunRecord:
    """Everything a report needs, at control-tick resolution."""

    scenario: str
    variant: str
    seed: int
    digest: str
    dimension: int
    terminated: str
    times: FloatArray
    positions: FloatArray
    velocities: FloatArray
    inputs: FloatArray
    reference_positions: FloatArray
    distances: FloatArray  # (T, n_obstacles) signed clearance
    barrier_b: FloatArray | None
    barrier_gamma1: FloatArray | None
    kkt_residuals: FloatArray | None
    solver_optimal: FloatArray | None
    start: FloatArray = field(default_factory=lambda: np.zeros(3))
    goal: FloatArray = field(default_factory=lambda: np.zeros(3))
    sink_strength: float = 0.0
    obstacle_radii: FloatArray = field(default_factory=lambda: np.zeros(0))
    snapshot_times: FloatArray = field(default_factory=lambda: np.zeros(0))
    # (S, n_obstacles, 3) member centers at the snapshot times; the world
    # is closed-form in t, so a coarse 1 s sampling replays any run's scene
    obstacle_snapshots: FloatArray = field(default_factory=lambda: np.zeros((0, 0, 3)))
    vpm_solves: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def conv(value: Any) -> Any:
            if isinstance(value, np.ndarray):
                return value.tolist()
            if isinstance(value, (np.floating, np.integer)):
                return value.item()
            if isinstance(value, float) and math.isnan(value):
                return None
            if isinstance(value, dict):
                return {k: conv(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [conv(v) for v in value]
            return value

        payload = {k: conv(v) for k, v in self.__dict__.items()}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        raw = json.loads(text)
        arrays = (
            "times", "positions", "velocities", "inputs",
            "reference_positions", "distances", "barrier_b",
            "barrier_gamma1", "kkt_residuals", "solver_optimal",
            "start", "goal", "obstacle_radii", "snapshot_times",
            "obstacle_snapshots",
        )
        for key in arrays:
            if raw.get(key) is not None:
                raw[key] = np.asarray(raw[key], dtype=float)
        return cls(**raw)


def save_record(record: RunRecord, directory: str | FilePath) -> FilePath:
    out = FilePath(directory)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{record.scenario}_{record.variant}_seed{record.seed}.json"
    path = out / name
    path.write_text(record.to_json())
    return path


def flow_components(scenario: Scenario) -> list:
    """Background elements: sink at the goal, optional source and stream."""
    comps: list = [PointSource(center=scenario.goal[:2], strength=-scenario.flow.sink_strength)]
    if scenario.flow.source_strength > 0.0:
        comps.append(PointSource(center=scenario.start[:2], strength=scenario.flow.source_strength))
    if scenario.flow.uniform_speed > 0.0:
        angle = attack_angle(scenario.start[:2], scenario.goal[:2])
        comps.append(UniformFlow(speed=scenario.flow.uniform_speed, attack_angle=angle))
    return comps


def _solve_field(
    scenario: Scenario,
    elements: list,
    scan_points: FloatArray | None,
    position: FloatArray,
    heading: float,
    v_max: float,
    xi_locked: float | None = None,
) -> tuple[list, dict | None]:
    """Rebuild panel surfaces from the latest scan and solve the field.

    Returns (components, solve_event).  Falls back to the bare elements
    when there is nothing to build or the construction degenerates.
    `xi_locked` pins the signed stream offset for the rest of an encounter;
    re-deciding the side at every refresh lets the choice flap with the
    heading and whipsaw the vehicle mid-pass.
    """
    if scan_points is None or len(scan_points) < 2:
        return elements, None
    params = virtual_surface.SurfaceTransformParams(
        mu=scenario.surface.mu,
        kappa=scenario.surface.kappa,
        l_kutta=scenario.surface.l_kutta,
    )
    surfaces: list[panel_solver.PanelSurface] = []
    kuttas: list[FloatArray] = []
    centroids: list[FloatArray] = []
    for cluster in virtual_surface.cluster_scan(scan_points, min_gap=_CLUSTER_MIN_GAP):
        if len(cluster) < 2:
            continue
        centroid = cluster.mean(axis=0)
        flow_dir = guidance.field_velocity(elements, centroid, v_max)
        try:
            ordered = virtual_surface.order_cluster(cluster, centroid, flow_dir)
            thinned = virtual_surface.decimate(ordered, scenario.surface.max_panels)
            moved = virtual_surface.transform(thinned, position[:2], params)
            surfaces.append(panel_solver.PanelSurface(vertices=moved.vertices))
            kuttas.append(moved.kutta_point)
            centroids.append(moved.centroid)
        except StreamnavError:
            continue
    if not surfaces:
        return elements, None
    try:
        if scenario.variant == "vpm_a":
            panel_solver.solve_kutta(surfaces, elements, kuttas)
            xi_signed = 0.0
            side_vote = 0.0
            nearest = None
            psi_values = [float(s.psi_s) for s in surfaces]
        else:
            system = panel_solver.assemble(surfaces, elements)
            bounds = virtual_surface.stream_bounds(system, scenario.flow.sink_strength)
            gaps = [float(np.hypot(*(c - position[:2]))) for c in centroids]
            nearest = centroids[int(np.argmin(gaps))]
            side_vote = virtual_surface.choose_side(
                position[:2], heading, nearest, abs(scenario.xi)
            )
            xi_signed = side_vote if xi_locked is None else xi_locked
            psi = virtual_surface.select_psi(bounds, xi_signed)
            panel_solver.solve_prescribed_psi(system, psi)
            psi_values = [psi] * len(surfaces)
    except StreamnavError:
        return elements, None
    event = {
        "xi": xi_signed,
        "side_vote": side_vote,
        "nearest": None if nearest is None else nearest.tolist(),
        "psi": psi_values,
        "surfaces": [s.vertices.tolist() for s in surfaces],
        "gammas": [s.gamma.tolist() for s in surfaces],
    }
    return elements + surfaces, event


def _horizon_reference(
    ref: guidance.ReferenceState,
    components: list,
    scenario: Scenario,
    dt: float,
    n_nodes: int,
) -> tuple[FloatArray, FloatArray]:
    """March the guidance field forward to produce tracker waypoints."""
    pos = np.empty((n_nodes + 1, 3))
    vel = np.empty((n_nodes + 1, 3))
    pos[0] = ref.position
    vel[0] = ref.velocity
    state = ref
    for k in range(1, n_nodes + 1):
        state = guidance.advance_reference(
            state, components, dt, scenario.v_max, scenario.goal[:2]
        )
        pos[k] = state.position
        vel[k] = state.velocity
    return pos, vel


def _known_center_forecasts(
    scenario: Scenario, world: world_sim.World, t: float, n_nodes: int
) -> list[safety_mpc.ObstacleForecast]:
    """Frozen ground-truth snapshots for the plain distance constraint.

    Freezing the current center across the horizon is exactly that
    variant's defining limitation; estimator-backed variants receive
    their forecasts from filters fed with the same centers instead.
    """
    centers = world.flat_centers(t)
    radius = scenario.known_radius + scenario.safety.r_s
    kinds = world.flat_kinds()
    out = []
    for idx in range(len(centers)):
        out.append(
            safety_mpc.ObstacleForecast(
                positions=np.tile(centers[idx], (n_nodes + 1, 1)),
                velocities=np.zeros((n_nodes + 1, 3)),
                accelerations=np.zeros((n_nodes + 1, 3)),
                radii=np.full(n_nodes + 1, radius),
                euclidean=True,
                planar=kinds[idx] == "cylinder",
            )
        )
    return out


def _known_akf_forecasts(
    scenario: Scenario,
    filters: list[AdaptiveFilter | None],
    hits: list[int],
    world: world_sim.World,
    n_nodes: int,
    dt: float,
) -> list[safety_mpc.ObstacleForecast]:
    """Estimator forecasts when exact centers replace the range sensor.

    Only the measurement source changes relative to the scan-driven path:
    velocity, acceleration, and the covariance-inflated keep-out radius
    still come from the filter, and immature filters are still pinned to
    a frozen ball at the last fix.
    """
    euclidean = scenario.variant == "vpm_star_mpc_akf"
    d = scenario.dimension
    kinds = world.flat_kinds()
    r_s = scenario.safety.r_s
    lambda0 = scenario.safety.lambda0

    def rows(arr: FloatArray, fill: float) -> FloatArray:
        if d == 3:
            return arr
        return np.column_stack([arr, np.full(len(arr), fill)])

    out = []
    for idx, filt in enumerate(filters):
        if filt is None:
            continue
        planar = kinds[idx] == "cylinder"
        if hits[idx] < _MATURE_HITS:
            center = rows(filt.position[None, :], scenario.altitude)[0]
            sigma_p = math.sqrt(
                max(float(np.linalg.eigvalsh(filt.p_cov[:d, :d])[-1]), 0.0)
            )
            out.append(
                safety_mpc.ObstacleForecast(
                    positions=np.tile(center, (n_nodes + 1, 1)),
                    velocities=np.zeros((n_nodes + 1, 3)),
                    accelerations=np.zeros((n_nodes + 1, 3)),
                    radii=np.full(
                        n_nodes + 1,
                        scenario.known_radius + r_s + lambda0 * sigma_p,
                    ),
                    euclidean=True,
                    planar=planar,
                )
            )
            continue
        hp = predict_horizon(filt, dt, n_nodes, r_s, lambda0)
        out.append(
            safety_mpc.ObstacleForecast(
                positions=rows(hp.positions, scenario.altitude),
                velocities=rows(hp.velocities, 0.0),
                accelerations=rows(hp.accelerations, 0.0),
                radii=scenario.known_radius + hp.inflated_safety,
                euclidean=euclidean,
                planar=planar,
            )
        )
    return out


def _tracked_forecasts(
    scenario: Scenario,
    table: TrackTable,
    altitude: float,
    n_nodes: int,
    dt: float,
) -> list[safety_mpc.ObstacleForecast]:
    """Estimator-driven forecasts with covariance-inflated radii.

    A freshly spawned track still carries its prior velocity and
    acceleration covariance; propagating that open loop walls off the
    whole horizon.  Until a track has been sighted continuously for a
    while it is treated as a frozen disc at its current fix instead.
    """
    euclidean = scenario.variant == "vpm_star_mpc_akf"
    out = []
    for track in table.tracks:
        semi_major = float(track.filt.shape_state[0])
        if track.hits < _MATURE_HITS:
            center = np.r_[track.filt.position, altitude]
            sigma_p = math.sqrt(
                max(float(np.linalg.eigvalsh(track.filt.p_cov[:2, :2])[-1]), 0.0)
            )
            radius = semi_major + scenario.safety.r_s + scenario.safety.lambda0 * sigma_p
            out.append(
                safety_mpc.ObstacleForecast(
                    positions=np.tile(center, (n_nodes + 1, 1)),
                    velocities=np.zeros((n_nodes + 1, 3)),
                    accelerations=np.zeros((n_nodes + 1, 3)),
                    radii=np.full(n_nodes + 1, radius),
                    euclidean=True,
                    planar=True,
                )
            )
            continue
        hp = predict_horizon(
            track.filt, dt, n_nodes, scenario.safety.r_s, scenario.safety.lambda0
        )
        pos = np.column_stack([hp.positions, np.full(n_nodes + 1, altitude)])
        vel = np.column_stack([hp.velocities, np.zeros(n_nodes + 1)])
        acc = np.column_stack([hp.accelerations, np.zeros(n_nodes + 1)])
        out.append(
            safety_mpc.ObstacleForecast(
                positions=pos,
                velocities=vel,
                accelerations=acc,
                radii=semi_major + hp.inflated_safety,
                euclidean=euclidean,
                planar=True,
            )
        )
    return out


def _snapshot_forecasts(
    scenario: Scenario,
    snapshots: list,
    altitude: float,
    n_nodes: int,
) -> list[safety_mpc.ObstacleForecast]:
    """Frozen-center forecasts from the latest fitted ellipses alone."""
    out = []
    for obs in snapshots:
        center = np.r_[obs.center, altitude]
        radius = obs.semi_major + scenario.safety.r_s
        out.append(
            safety_mpc.ObstacleForecast(
                positions=np.tile(center, (n_nodes + 1, 1)),
                velocities=np.zeros((n_nodes + 1, 3)),
                accelerations=np.zeros((n_nodes + 1, 3)),
                radii=np.full(n_nodes + 1, radius),
                euclidean=True,
                planar=True,
            )
        )
    return out


def _prune_forecasts(
    forecasts: list[safety_mpc.ObstacleForecast],
    x: FloatArray,
    u_max: float,
    dt: float,
) -> list[safety_mpc.ObstacleForecast]:
    """Drop rows no reachable vehicle trajectory could ever activate."""
    speed = float(np.linalg.norm(x[3:]))
    n = None
    kept = []
    for fc in forecasts:
        if n is None:
            n = len(fc.positions)
            taus = np.arange(n) * dt
            reach = speed * taus + 0.5 * u_max * taus**2
        delta = fc.positions - x[:3]
        if fc.planar:
            delta = delta[:, :2]
        sep = np.linalg.norm(delta, axis=1) - fc.radii - reach
        if sep.min() <= _PRUNE_MARGIN:
            kept.append(fc)
    return kept


def run_scenario(scenario: Scenario, seed: int) -> RunRecord:
    if scenario.variant == "apf":
        return _run_apf(scenario, seed)
    return _run_closed_loop(scenario, seed)


def _scene_snapshots(
    world: world_sim.World, t_end: float, step: float = 1.0
) -> tuple[FloatArray, FloatArray]:
    """Member centers sampled coarsely over [0, t_end] for replay and plots."""
    times = np.arange(0.0, t_end + 0.5 * step, step)
    if world.n_obstacles == 0:
        return times, np.zeros((len(times), 0, 3))
    return times, np.stack([world.flat_centers(t) for t in times])


def _run_apf(scenario: Scenario, seed: int) -> RunRecord:
    world = build_world(scenario, seed)
    path, reached, _ = world_sim.apf_navigate(
        world,
        scenario.start,
        scenario.goal,
        goal_tolerance=scenario.goal_tolerance,
    )
    speed = max(scenario.v_max, 1e-6)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    times = np.r_[0.0, np.cumsum(seg) / speed]
    positions = np.column_stack([path, np.full(len(path), scenario.altitude)])
    velocities = np.zeros_like(positions)
    if len(path) > 1:
        velocities[:-1, :2] = np.diff(path, axis=0) / np.maximum(np.diff(times)[:, None], 1e-9)
    distances = np.stack([world.surface_distances(p, 0.0) for p in positions])
    goal_time = float(times[-1]) if reached else math.nan
    metrics = world_sim.compute_metrics(
        times, positions, velocities, np.zeros_like(positions),
        distances, reached, goal_time, world.sensor_range,
    )
    snap_times, snaps = _scene_snapshots(world, float(times[-1]))
    return RunRecord(
        scenario=scenario.name,
        variant=scenario.variant,
        seed=seed,
        digest=scenario.digest,
        dimension=scenario.dimension,
        terminated="goal" if reached else "stalled",
        times=times,
        positions=positions,
        velocities=velocities,
        inputs=np.zeros_like(positions),
        reference_positions=positions,
        distances=distances,
        barrier_b=None,
        barrier_gamma1=None,
        kkt_residuals=None,
        solver_optimal=None,
        start=scenario.start.copy(),
        goal=scenario.goal.copy(),
        sink_strength=scenario.flow.sink_strength,
        obstacle_radii=world.flat_radii(),
        snapshot_times=snap_times,
        obstacle_snapshots=snaps,
        metrics=metrics.__dict__,
    )


def _run_closed_loop(scenario: Scenario, seed: int) -> RunRecord:
    uses_panels = scenario.variant in ("vpm_a", "vpm_b", "vpm_mpc_hocbf_akf")
    uses_mpc = scenario.variant.startswith("vpm") and "mpc" in scenario.variant
    uses_akf = scenario.variant.endswith("akf")
    uses_hocbf = "hocbf" in scenario.variant
    uses_sensor = not scenario.known_centers and (uses_panels or uses_mpc)

    world = build_world(scenario, seed)
    rng = np.random.default_rng(seed + 77_003)
    elements = flow_components(scenario)
    x = np.r_[scenario.start, np.zeros(3)]
    ref = guidance.ReferenceState(
        position=scenario.start.copy(),
        velocity=np.zeros(3),
        heading=attack_angle(scenario.start[:2], scenario.goal[:2]),
        time=0.0,
    )
    components = list(elements)
    table = TrackTable(
        gate_radius=2.0 * _TRACK_GATE_SPEED * SCAN_DT,
        filter_kwargs={
            "alpha_min": scenario.estimator.alpha_min,
            "alpha_max": scenario.estimator.alpha_max,
            "rho": scenario.estimator.rho,
        },
    )
    snapshots: list = []
    latest_scan: FloatArray | None = None
    warm: FloatArray | None = None
    xi_lock: float | None = None
    lock_anchor: FloatArray | None = None
    mpc = scenario.mpc
    w_z = mpc.w_track if mpc.w_track_vertical is None else mpc.w_track_vertical
    w_track_mat = np.diag([mpc.w_track, mpc.w_track, w_z])
    # exact-center feeds keep one filter per obstacle; association is by
    # identity, so no track table is involved
    kc_filters: list[AdaptiveFilter | None] = [None] * world.n_obstacles
    kc_hits = [0] * world.n_obstacles
    feeds_centers = scenario.known_centers and uses_akf

    n_ticks = round(scenario.duration / CONTROL_DT)
    n_obs = world.n_obstacles
    times = np.empty(n_ticks)
    positions = np.empty((n_ticks, 3))
    velocities = np.empty((n_ticks, 3))
    inputs = np.empty((n_ticks, 3))
    ref_positions = np.empty((n_ticks, 3))
    distances = np.empty((n_ticks, n_obs))
    barrier_b = np.empty((n_ticks, n_obs)) if uses_mpc else None
    barrier_g1 = np.empty((n_ticks, n_obs)) if uses_hocbf else None
    kkts = np.empty(n_ticks) if uses_mpc else None
    optimal = np.empty(n_ticks) if uses_mpc else None
    vpm_events: list[dict] = []

    terminated = "timeout"
    reached = False
    goal_time = math.nan
    tick = 0
    for tick in range(n_ticks):
        t = tick * CONTROL_DT
        if feeds_centers and tick % _TICKS_PER_SCAN == 0:
            d = scenario.dimension
            for i, center in enumerate(world.flat_centers(t)[:, :d]):
                filt = kc_filters[i]
                if filt is None:
                    filt = AdaptiveFilter(
                        dim=d,
                        with_shape=False,
                        alpha_min=scenario.estimator.alpha_min,
                        alpha_max=scenario.estimator.alpha_max,
                        rho=scenario.estimator.rho,
                    )
                    filt.x[:d] = center
                    kc_filters[i] = filt
                else:
                    filt.step(center, SCAN_DT)
                kc_hits[i] += 1
        if uses_sensor and tick % _TICKS_PER_SCAN == 0:
            latest_scan = world.scan(x[:3], t, rng)
            if uses_mpc:
                snapshots = []
                for cluster in virtual_surface.cluster_scan(
                    latest_scan, min_gap=_CLUSTER_MIN_GAP
                ):
                    try:
                        snapshots.append(fit_mbe(cluster, tol=1e-7))
                    except StreamnavError:
                        continue
                if uses_akf:
                    table.update(snapshots, t)
        if uses_panels and tick % _TICKS_PER_FIELD == 0:
            components, event = _solve_field(
                scenario, elements, latest_scan, x, ref.heading, scenario.v_max, xi_lock
            )
            if event is not None:
                event["time"] = t
                vpm_events.append(event)
                if scenario.variant != "vpm_a":
                    # first vote of an encounter wins: re-deciding mid-pass
                    # reverses the circulation next to the surface and pushes
                    # the streamline through it.  A fresh vote is taken only
                    # when the nearest cluster jumps to a different obstacle
                    # while that obstacle is still comfortably far away.
                    nearest = np.asarray(event["nearest"])
                    if xi_lock is None or (
                        lock_anchor is not None
                        and float(np.hypot(*(nearest - lock_anchor))) > _ENCOUNTER_JUMP
                        and float(np.hypot(*(nearest - x[:2]))) > _SIDE_FREEZE_RANGE
                    ):
                        xi_lock = event["side_vote"]
                    lock_anchor = nearest
            elif latest_scan is None or len(latest_scan) < 2:
                # encounter over: nothing in range, next contact re-decides;
                # a failed solve with hits still present keeps the lock
                xi_lock = None
                lock_anchor = None

        gap = float(np.hypot(*(ref.position[:2] - x[:2])))
        if gap <= scenario.carrot_gap:
            ref = guidance.advance_reference(
                ref, components, CONTROL_DT, scenario.v_max, scenario.goal[:2]
            )

        if uses_mpc:
            dt_h = mpc.horizon / mpc.n_nodes
            ref_pos, ref_vel = _horizon_reference(ref, components, scenario, dt_h, mpc.n_nodes)
            if feeds_centers:
                forecasts = _known_akf_forecasts(
                    scenario, kc_filters, kc_hits, world, mpc.n_nodes, dt_h
                )
            elif scenario.known_centers:
                forecasts = _known_center_forecasts(scenario, world, t, mpc.n_nodes)
            elif uses_akf:
                forecasts = _tracked_forecasts(
                    scenario, table, scenario.altitude, mpc.n_nodes, dt_h
                )
            else:
                forecasts = _snapshot_forecasts(
                    scenario, snapshots, scenario.altitude, mpc.n_nodes
                )
            forecasts = _prune_forecasts(forecasts, x, scenario.vehicle.u_max, dt_h)
            prob = safety_mpc.OcpProblem(
                x0=x.copy(),
                reference=ref_pos,
                reference_velocities=ref_vel,
                horizon=mpc.horizon,
                n_nodes=mpc.n_nodes,
                w_track=w_track_mat,
                w_velocity=mpc.w_vel * np.eye(3),
                w_input=mpc.w_input * np.eye(3),
                w_terminal=mpc.w_terminal * np.eye(3),
                u_max=np.full(3, scenario.vehicle.u_max),
                slack_weight=mpc.slack_weight,
                beta1=scenario.safety.beta1,
                beta2=scenario.safety.beta2,
                obstacles=forecasts,
                iterations=mpc.iterations,
            )
            sol = safety_mpc.solve(prob, warm)
            warm = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
            u = sol.inputs[0]
            kkts[tick] = sol.kkt_residual
            optimal[tick] = 1.0 if sol.status is safety_mpc.SolveStatus.OPTIMAL else 0.0
        else:
            err_p = ref.position - x[:3]
            err_v = ref.velocity - x[3:]
            u = scenario.vehicle.kp * err_p + scenario.vehicle.kd * err_v
            u = np.clip(u, -scenario.vehicle.u_max, scenario.vehicle.u_max)

        times[tick] = t
        positions[tick] = x[:3]
        velocities[tick] = x[3:]
        inputs[tick] = u
        ref_positions[tick] = ref.position
        dists = world.surface_distances(x[:3], t)
        distances[tick] = dists
        if barrier_b is not None:
            barrier_b[tick] = dists - scenario.safety.r_s
        if barrier_g1 is not None and n_obs:
            centers = world.flat_centers(t)
            vels = np.vstack([g.member_velocities(t) for g in world.groups])
            for j in range(n_obs):
                dp = x[:3] - centers[j]
                dv = x[3:] - vels[j]
                if world.flat_kinds()[j] == "cylinder":
                    dp, dv = dp.copy(), dv.copy()
                    dp[2] = dv[2] = 0.0
                sep = float(np.linalg.norm(dp))
                barrier_g1[tick, j] = (
                    float(dp @ dv) / max(sep, 1e-9)
                    + scenario.safety.beta1 * barrier_b[tick, j]
                )

        collided = False
        for sub in range(_STEPS_PER_TICK):
            x = safety_mpc.rk4_step(x, u, SIM_DT)
            t_sub = t + (sub + 1) * SIM_DT
            if n_obs and world.surface_distances(x[:3], t_sub).min() < 0.0:
                collided = True
                break
        if collided:
            terminated = "collision"
            tick += 1
            break
        if guidance.goal_reached(x[:3], scenario.goal[:2], scenario.goal_tolerance):
            terminated = "goal"
            reached = True
            goal_time = t + CONTROL_DT
            tick += 1
            break
    else:
        tick = n_ticks

    sl = slice(0, tick)
    metrics = world_sim.compute_metrics(
        times[sl], positions[sl], velocities[sl], inputs[sl],
        distances[sl], reached, goal_time, world.sensor_range,
    )
    snap_times, snaps = _scene_snapshots(world, float(times[tick - 1]))
    return RunRecord(
        scenario=scenario.name,
        variant=scenario.variant,
        seed=seed,
        digest=scenario.digest,
        dimension=scenario.dimension,
        terminated=terminated,
        times=times[sl],
        positions=positions[sl],
        velocities=velocities[sl],
        inputs=inputs[sl],
        reference_positions=ref_positions[sl],
        distances=distances[sl],
        barrier_b=barrier_b[sl] if barrier_b is not None else None,
        barrier_gamma1=barrier_g1[sl] if barrier_g1 is not None else None,
        kkt_residuals=kkts[sl] if kkts is not None else None,
        solver_optimal=optimal[sl] if optimal is not None else None,
        start=scenario.start.copy(),
        goal=scenario.goal.copy(),
        sink_strength=scenario.flow.sink_strength,
        obstacle_radii=world.flat_radii(),
        snapshot_times=snap_times,
        obstacle_snapshots=snaps,
        vpm_solves=vpm_events,
        metrics=metrics.__dict__,
    )
