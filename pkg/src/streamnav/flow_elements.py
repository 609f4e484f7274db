"""Planar potential-flow building blocks.

The guidance field is a superposition of ideal-flow elements: a uniform
stream, point sources/sinks, and point vortices.  Velocities follow from
the stream function psi through

    v_x = d(psi)/dy,    v_y = -d(psi)/dx,

so every element here provides an analytically consistent
(stream_value, velocity) pair.  Solved panel surfaces expose the same two
methods and plug into `superpose` unchanged.

Sign conventions: positive source strength pushes flow radially outward,
a sink is a source with negative strength, and positive vortex strength
circulates counterclockwise.  Strengths carry units of m^2/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np
from numpy.typing import NDArray

from .errors import SingularQuery

FloatArray = NDArray[np.float64]

# Queries closer than this to a point element's center are rejected rather
# than returning huge finite garbage.
SINGULAR_RADIUS = 1e-12


class FieldComponent(Protocol):
    def stream_value(self, point: FloatArray) -> float: ...

    def velocity(self, point: FloatArray) -> FloatArray: ...


@dataclass(frozen=True)
class FieldSample:
    """Superposed field at one query point."""

    velocity: FloatArray
    stream_value: float

    @property
    def speed(self) -> float:
        return float(np.hypot(self.velocity[0], self.velocity[1]))


@dataclass(frozen=True)
class UniformFlow:
    """Uniform stream of the given speed along the attack angle (radians)."""

    speed: float
    attack_angle: float

    def stream_value(self, point: FloatArray) -> float:
        x, y = float(point[0]), float(point[1])
        return self.speed * (y * math.cos(self.attack_angle) - x * math.sin(self.attack_angle))

    def velocity(self, point: FloatArray) -> FloatArray:
        return np.array(
            [self.speed * math.cos(self.attack_angle), self.speed * math.sin(self.attack_angle)]
        )


def _offset(center: FloatArray, point: FloatArray) -> tuple[float, float, float]:
    dx = float(point[0]) - float(center[0])
    dy = float(point[1]) - float(center[1])
    rr = dx * dx + dy * dy
    if rr < SINGULAR_RADIUS * SINGULAR_RADIUS:
        raise SingularQuery(f"query point {point!r} inside singular core at {center!r}")
    return dx, dy, rr


@dataclass(frozen=True)
class PointSource:
    """Radial source (strength > 0) or sink (strength < 0)."""

    center: FloatArray
    strength: float

    def stream_value(self, point: FloatArray) -> float:
        dx, dy, _ = _offset(self.center, point)
        return self.strength / (2.0 * math.pi) * math.atan2(dy, dx)

    def velocity(self, point: FloatArray) -> FloatArray:
        dx, dy, rr = _offset(self.center, point)
        k = self.strength / (2.0 * math.pi * rr)
        return np.array([k * dx, k * dy])


@dataclass(frozen=True)
class PointVortex:
    """Irrotational vortex; positive strength circulates counterclockwise."""

    center: FloatArray
    strength: float

    def stream_value(self, point: FloatArray) -> float:
        _, _, rr = _offset(self.center, point)
        return -self.strength / (4.0 * math.pi) * math.log(rr)

    def velocity(self, point: FloatArray) -> FloatArray:
        dx, dy, rr = _offset(self.center, point)
        k = self.strength / (2.0 * math.pi * rr)
        return np.array([-k * dy, k * dx])


def attack_angle(source_position: FloatArray, sink_position: FloatArray) -> float:
    """Angle of the uniform stream that carries flow from source to sink."""
    return math.atan2(
        float(sink_position[1]) - float(source_position[1]),
        float(sink_position[0]) - float(source_position[0]),
    )


def superpose(components: Iterable[FieldComponent], point: FloatArray) -> FieldSample:
    """Sample the combined field of elements and solved surfaces at a point."""
    velocity = np.zeros(2)
    psi = 0.0
    for component in components:
        velocity = velocity + component.velocity(point)
        psi += component.stream_value(point)
    return FieldSample(velocity=velocity, stream_value=psi)
