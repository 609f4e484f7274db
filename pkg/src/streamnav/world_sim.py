"""Simulation world: obstacle motion, range sensing, and run metrics.

Obstacle groups are rigid arrangements of circles (cylinders seen in the
altitude-hold plane) or spheres whose centroid follows a closed-form
path; groups may additionally spin about their centroid.  Paths are
parameterized by peak speed: the phase rate is solved numerically so the
fastest point of the curve moves at the requested speed.

The range sensor is a planar 360-ray scanner with one-degree spacing,
Gaussian range noise, and a hard maximum range; returns beyond the
maximum are dropped, matching how a real unit reports no-echo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .flow_elements import FloatArray

SENSOR_RANGE = 3.5
SENSOR_RAYS = 360
_DIFF_STEP = 1e-5


# ---------------------------------------------------------------------------
# paths


class Path:
    """Closed-form centroid motion; subclasses define _point(tau)."""

    period: float = 2.0 * math.pi

    def __init__(self, peak_speed: float, phase: float = 0.0) -> None:
        if peak_speed < 0.0:
            raise ConfigError("peak_speed must be nonnegative")
        self.peak_speed = peak_speed
        self.phase = phase
        self.rate = self._solve_rate(peak_speed)

    def _point(self, tau: float) -> FloatArray:
        raise NotImplementedError

    def _solve_rate(self, peak_speed: float) -> float:
        if peak_speed == 0.0:
            return 0.0
        taus = np.linspace(0.0, self.period, 4096, endpoint=False)
        h = _DIFF_STEP
        top = 0.0
        for tau in taus:
            d = (self._point(tau + h) - self._point(tau - h)) / (2.0 * h)
            top = max(top, float(np.linalg.norm(d)))
        if top == 0.0:
            return 0.0
        return peak_speed / top

    def position(self, t: float) -> FloatArray:
        return self._point(self.rate * t + self.phase)

    def velocity(self, t: float) -> FloatArray:
        h = _DIFF_STEP
        return (self.position(t + h) - self.position(t - h)) / (2.0 * h)

    def acceleration(self, t: float) -> FloatArray:
        h = 1e-4
        return (self.position(t + h) - 2.0 * self.position(t) + self.position(t - h)) / (h * h)


class StaticPath(Path):
    def __init__(self, point: Sequence[float]) -> None:
        self._p = np.asarray(point, dtype=float)
        super().__init__(0.0)

    def _point(self, tau: float) -> FloatArray:
        return self._p.copy()


class CirclePath(Path):
    def __init__(
        self, center: Sequence[float], radius: float, peak_speed: float, phase: float = 0.0
    ) -> None:
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        super().__init__(peak_speed, phase)

    def _point(self, tau: float) -> FloatArray:
        out = self.center.copy()
        out[0] += self.radius * math.cos(tau)
        out[1] += self.radius * math.sin(tau)
        return out


class LemniscatePath(Path):
    """Figure-eight of Bernoulli scaled to a given half-width."""

    def __init__(
        self, center: Sequence[float], half_width: float, peak_speed: float, phase: float = 0.0
    ) -> None:
        self.center = np.asarray(center, dtype=float)
        self.half_width = float(half_width)
        super().__init__(peak_speed, phase)

    def _point(self, tau: float) -> FloatArray:
        s, c = math.sin(tau), math.cos(tau)
        den = 1.0 + s * s
        out = self.center.copy()
        out[0] += self.half_width * c / den
        out[1] += self.half_width * s * c / den
        return out


class TorusPath(Path):
    """Winding curve on a torus, n turns of the small circle per loop."""

    def __init__(
        self,
        center: Sequence[float],
        major_radius: float,
        minor_radius: float,
        windings: int,
        peak_speed: float,
        phase: float = 0.0,
    ) -> None:
        self.center = np.asarray(center, dtype=float)
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)
        self.windings = int(windings)
        super().__init__(peak_speed, phase)

    def _point(self, tau: float) -> FloatArray:
        ring = self.major_radius + self.minor_radius * math.cos(self.windings * tau)
        return self.center + np.array(
            [
                ring * math.cos(tau),
                ring * math.sin(tau),
                self.minor_radius * math.sin(self.windings * tau),
            ]
        )


class LissajousPath(Path):
    def __init__(
        self,
        center: Sequence[float],
        amplitude: float,
        peak_speed: float,
        freqs: Sequence[int] = (1, 2, 3),
        phase: float = 0.0,
    ) -> None:
        self.center = np.asarray(center, dtype=float)
        self.amplitude = float(amplitude)
        self.freqs = tuple(int(f) for f in freqs)
        super().__init__(peak_speed, phase)

    def _point(self, tau: float) -> FloatArray:
        a, b, c = self.freqs
        return self.center + self.amplitude * np.array(
            [
                math.sin(a * tau + 0.5 * math.pi),
                math.sin(b * tau),
                0.4 * math.sin(c * tau + 0.25 * math.pi),
            ]
        )


# ---------------------------------------------------------------------------
# obstacles


@dataclass
class ObstacleGroup:
    """Rigid group of equal-radius members around a moving centroid.

    `offsets` are member positions in the group frame; `spin_rate` turns
    the frame about the centroid's vertical axis.  `kind` selects the
    distance model: cylinders measure in the plane, spheres in full 3D.
    """

    path: Path
    radius: float
    offsets: FloatArray = field(default_factory=lambda: np.zeros((1, 3)))
    spin_rate: float = 0.0
    spin_phase: float = 0.0
    kind: str = "cylinder"

    def __post_init__(self) -> None:
        self.offsets = np.atleast_2d(np.asarray(self.offsets, dtype=float))
        if self.offsets.shape[1] == 2:
            self.offsets = np.hstack([self.offsets, np.zeros((len(self.offsets), 1))])
        if self.kind not in ("cylinder", "sphere"):
            raise ConfigError(f"unknown obstacle kind {self.kind!r}")
        if self.radius <= 0.0:
            raise ConfigError("obstacle radius must be positive")

    @property
    def n_members(self) -> int:
        return len(self.offsets)

    def centers(self, t: float) -> FloatArray:
        c = self.path.position(t)
        ang = self.spin_rate * t + self.spin_phase
        rot = np.array(
            [
                [math.cos(ang), -math.sin(ang), 0.0],
                [math.sin(ang), math.cos(ang), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        return c + self.offsets @ rot.T

    def member_velocities(self, t: float) -> FloatArray:
        h = _DIFF_STEP
        return (self.centers(t + h) - self.centers(t - h)) / (2.0 * h)

    def member_accelerations(self, t: float) -> FloatArray:
        h = 1e-4
        return (self.centers(t + h) - 2.0 * self.centers(t) + self.centers(t - h)) / (h * h)


@dataclass
class World:
    groups: list[ObstacleGroup] = field(default_factory=list)
    sensor_range: float = SENSOR_RANGE
    sensor_sigma: float = 0.01

    @property
    def n_obstacles(self) -> int:
        return sum(g.n_members for g in self.groups)

    def flat_centers(self, t: float) -> FloatArray:
        if not self.groups:
            return np.zeros((0, 3))
        return np.vstack([g.centers(t) for g in self.groups])

    def flat_radii(self) -> FloatArray:
        if not self.groups:
            return np.zeros(0)
        return np.concatenate([np.full(g.n_members, g.radius) for g in self.groups])

    def flat_kinds(self) -> list[str]:
        return [g.kind for g in self.groups for _ in range(g.n_members)]

    def surface_distances(self, position: FloatArray, t: float) -> FloatArray:
        """Signed clearance to every member; negative means overlap."""
        centers = self.flat_centers(t)
        if len(centers) == 0:
            return np.zeros(0)
        delta = centers - np.asarray(position, dtype=float)
        planar = np.array([k == "cylinder" for k in self.flat_kinds()])
        dist = np.where(
            planar,
            np.linalg.norm(delta[:, :2], axis=1),
            np.linalg.norm(delta, axis=1),
        )
        return dist - self.flat_radii()

    # -- range sensing ------------------------------------------------------

    def scan(
        self, position: FloatArray, t: float, rng: np.random.Generator
    ) -> FloatArray:
        """Planar scan from `position`; returns hit points, shape (k, 2).

        Every ray draws a noise sample whether or not it hits, so the
        random stream does not depend on the geometry.
        """
        pos = np.asarray(position, dtype=float)[:2]
        angles = np.deg2rad(np.arange(SENSOR_RAYS, dtype=float))
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        ranges = np.full(SENSOR_RAYS, np.inf)
        centers = self.flat_centers(t)
        radii = self.flat_radii()
        for c, rho, kind in zip(centers, radii, self.flat_kinds()):
            if kind != "cylinder":
                continue
            rel = pos - c[:2]
            b = dirs @ rel
            disc = b * b - (rel @ rel - rho * rho)
            ok = disc >= 0.0
            root = np.sqrt(np.where(ok, disc, 0.0))
            hit = np.where(ok, -b - root, np.inf)
            hit = np.where(hit > 1e-9, hit, np.inf)
            ranges = np.minimum(ranges, hit)
        noise = rng.normal(0.0, self.sensor_sigma, size=SENSOR_RAYS)
        noisy = np.where(np.isfinite(ranges), ranges + noise, np.inf)
        keep = noisy <= self.sensor_range
        return pos + noisy[keep, None] * dirs[keep]


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class RunMetrics:
    collided: bool
    reached: bool
    goal_time: float
    min_distance: float
    mean_min_distance: float
    speed_variance: float
    control_effort: float
    path_length: float


def compute_metrics(
    times: FloatArray,
    positions: FloatArray,
    velocities: FloatArray,
    inputs: FloatArray,
    distances: FloatArray,
    reached: bool,
    goal_time: float,
    sensor_range: float = SENSOR_RANGE,
) -> RunMetrics:
    """Aggregate a finished run.

    `distances` is (T, n_obstacles) signed clearance per tick.  Speed
    variance only counts ticks with some obstacle inside sensor range,
    since steady cruising far from everything says nothing about how the
    avoidance disturbs the profile.
    """
    times = np.asarray(times, dtype=float)
    speeds = np.linalg.norm(np.asarray(velocities, dtype=float), axis=1)
    effort_density = np.einsum("ij,ij->i", inputs, inputs)
    effort = float(np.trapezoid(effort_density, times)) if len(times) > 1 else 0.0
    length = float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))
    if distances.size:
        per_obstacle = distances.min(axis=0)
        min_d = float(per_obstacle.min())
        mean_min = float(per_obstacle.mean())
        near = distances.min(axis=1) <= sensor_range
        var = float(np.var(speeds[near])) if near.any() else 0.0
        collided = min_d < 0.0
    else:
        min_d = math.inf
        mean_min = math.inf
        var = float(np.var(speeds)) if len(speeds) else 0.0
        collided = False
    return RunMetrics(
        collided=collided,
        reached=reached,
        goal_time=goal_time,
        min_distance=min_d,
        mean_min_distance=mean_min,
        speed_variance=var,
        control_effort=effort,
        path_length=length,
    )


# ---------------------------------------------------------------------------
# gradient-following baseline


def apf_navigate(
    world: World,
    start: FloatArray,
    goal: FloatArray,
    k_att: float = 1.0,
    k_rep: float = 2.0,
    influence: float = 2.5,
    step: float = 0.02,
    max_steps: int = 40_000,
    goal_tolerance: float = 0.3,
) -> tuple[FloatArray, bool, bool]:
    """Potential-field descent on a frozen world; returns (path, reached, stalled).

    Serves as the classical local-minimum-prone baseline on concave maps.
    A run stalls when the force vanishes or the position stops making
    progress (oscillation in a pocket).
    """
    p = np.asarray(start, dtype=float)[:2].copy()
    goal2 = np.asarray(goal, dtype=float)[:2]
    path = [p.copy()]
    centers = world.flat_centers(0.0)[:, :2]
    radii = world.flat_radii()
    window = 500
    for i in range(max_steps):
        force = -k_att * (p - goal2)
        if len(centers):
            rel = p - centers
            norms = np.linalg.norm(rel, axis=1)
            dist = norms - radii
            if dist.min() < 1e-6:
                return np.asarray(path), False, True
            near = dist < influence
            if near.any():
                coef = k_rep * (1.0 / dist[near] - 1.0 / influence) / dist[near] ** 2
                force += (coef / norms[near]) @ rel[near]
        norm = float(np.linalg.norm(force))
        if norm < 1e-6:
            return np.asarray(path), False, True
        p = p + step * force / norm
        path.append(p.copy())
        if np.linalg.norm(p - goal2) <= goal_tolerance:
            return np.asarray(path), True, False
        if i >= window and np.linalg.norm(p - path[-window]) < 2.0 * step:
            return np.asarray(path), False, True
    return np.asarray(path), False, True
