"""Reference generation by integrating the guidance field.

The reference point rides the superposed stream field: position advances
with one RK4 step per control tick, velocity is the (speed-clamped) field
value at the new position, and heading follows atan2 of the velocity.
A guard ball around the sink snaps the reference onto the goal before the
sink's singular core can be sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .flow_elements import FieldComponent, FloatArray, superpose

SINK_GUARD_RADIUS = 0.05


@dataclass(frozen=True)
class ReferenceState:
    """Planar reference pose; z carries the configured flight altitude."""

    position: FloatArray  # (3,)
    velocity: FloatArray  # (3,), zero z-component
    heading: float
    time: float


def field_velocity(
    components: Sequence[FieldComponent], point: FloatArray, v_max: float
) -> FloatArray:
    """Superposed planar velocity, rescaled onto the v_max speed cap."""
    v = superpose(components, point).velocity
    speed = float(np.hypot(v[0], v[1]))
    if speed > v_max > 0.0:
        v = v * (v_max / speed)
    return v


def advance_reference(
    state: ReferenceState,
    components: Sequence[FieldComponent],
    dt: float,
    v_max: float,
    sink_position: FloatArray,
) -> ReferenceState:
    """One RK4 step of the clamped field from the current reference."""
    p = np.asarray(state.position[:2], dtype=float)
    sink = np.asarray(sink_position, dtype=float)
    if float(np.hypot(*(p - sink))) <= SINK_GUARD_RADIUS:
        return replace(
            state,
            position=np.array([sink[0], sink[1], state.position[2]]),
            velocity=np.zeros(3),
            time=state.time + dt,
        )

    def f(q: FloatArray) -> FloatArray:
        # stage queries must respect the guard ball as well: an RK4 stage
        # stepping exactly onto the sink would sample the singular core
        if float(np.hypot(*(q - sink))) <= SINK_GUARD_RADIUS:
            return np.zeros(2)
        return field_velocity(components, q, v_max)

    k1 = f(p)
    k2 = f(p + 0.5 * dt * k1)
    k3 = f(p + 0.5 * dt * k2)
    k4 = f(p + dt * k3)
    new_p = p + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if float(np.hypot(*(new_p - sink))) <= SINK_GUARD_RADIUS:
        new_p = sink.copy()
        new_v = np.zeros(2)
    else:
        new_v = f(new_p)
    speed = float(np.hypot(new_v[0], new_v[1]))
    heading = math.atan2(new_v[1], new_v[0]) if speed > 1e-9 else state.heading
    return ReferenceState(
        position=np.array([new_p[0], new_p[1], state.position[2]]),
        velocity=np.array([new_v[0], new_v[1], 0.0]),
        heading=heading,
        time=state.time + dt,
    )


def goal_reached(position: FloatArray, sink_position: FloatArray, tolerance: float) -> bool:
    """Planar capture test, boundary inclusive."""
    dx = float(position[0]) - float(sink_position[0])
    dy = float(position[1]) - float(sink_position[1])
    return math.hypot(dx, dy) <= tolerance
