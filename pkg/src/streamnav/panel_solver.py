"""Vortex panel surfaces and the stream-function boundary solve.

A surface is a polyline of straight panels, each carrying a constant
vortex sheet strength gamma_j.  Collocating the total stream function at
the panel midpoints gives a dense linear system

    sum_j I_ij gamma_j = -psi_s(i) + F_i

where psi_s is the prescribed surface stream value and F_i collects the
stream values of the free elements at control point i.  Either psi_s is
prescribed per surface (`solve_prescribed_psi`) or it is solved together
with gamma by adding one trailing-edge collocation row per surface
(`solve_kutta`).

Kernel conventions.  The boundary entry I_ij follows the panel-frame form

    I = -(1/2pi) * (x ln(l2/l1) - L ln(l2) + y (W1 - W2)),

whose value at a panel's own midpoint is the analytic limit
(L/2pi) ln(L/2).  The exact induced stream function of a unit-strength
panel is the integral -(1/2pi) int_0^L ln(l(s)) ds, which works out to
L/2pi - I; field evaluation uses that integral-consistent kernel so that
stream values and velocities remain a gradient pair.  The induced
velocity of a panel in its own frame is

    (u, v) = (gamma/2pi) * (W1 - W2, ln(l1/l2)),

with u along the panel and v along its left normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from .errors import (
    DegeneratePanel,
    KuttaOnSurface,
    OverlappingPanels,
    SingularQuery,
    SingularSystem,
    UnsolvedSurface,
)
from .flow_elements import FieldComponent, FloatArray

MIN_PANEL_LENGTH = 1e-6
ENDPOINT_GUARD = 1e-9
CONDITION_LIMIT = 1e12
RESIDUAL_TOL = 1e-9
TWO_PI = 2.0 * math.pi


@dataclass
class PanelSurface:
    """Open polyline of vortex panels; strengths filled in by a solve."""

    vertices: FloatArray
    gamma: FloatArray | None = None
    psi_s: float | None = None

    # geometry caches, derived once in __post_init__
    starts: FloatArray = field(init=False, repr=False)
    tangents: FloatArray = field(init=False, repr=False)
    normals: FloatArray = field(init=False, repr=False)
    lengths: FloatArray = field(init=False, repr=False)
    control_points: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 2:
            raise DegeneratePanel(f"need at least two 2-D vertices, got shape {verts.shape}")
        self.vertices = verts
        edges = verts[1:] - verts[:-1]
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        if np.any(lengths <= MIN_PANEL_LENGTH):
            raise DegeneratePanel(f"panel length {lengths.min():.3e} below {MIN_PANEL_LENGTH:.0e}")
        self.starts = verts[:-1]
        self.lengths = lengths
        self.tangents = edges / lengths[:, None]
        # left normal of the tangent
        self.normals = np.column_stack([-self.tangents[:, 1], self.tangents[:, 0]])
        self.control_points = 0.5 * (verts[:-1] + verts[1:])

    @property
    def panel_count(self) -> int:
        return len(self.lengths)

    def panel_frames(self, point: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Panel-frame coordinates of one global point, for every panel."""
        d = np.asarray(point, dtype=float) - self.starts
        x = np.einsum("ij,ij->i", d, self.tangents)
        y = np.einsum("ij,ij->i", d, self.normals)
        return x, y

    def circulation(self) -> float:
        """Total vortex strength sum(gamma_j * L_j) of the solved surface."""
        if self.gamma is None:
            raise UnsolvedSurface("circulation requested before solve")
        return float(np.dot(self.gamma, self.lengths))

    def stream_value(self, point: FloatArray) -> float:
        if self.gamma is None:
            raise UnsolvedSurface("stream_value requested before solve")
        x, y = self.panel_frames(point)
        kernel = self.lengths / TWO_PI - _influence_entries(x, y, self.lengths)
        return float(np.dot(self.gamma, kernel))

    def velocity(self, point: FloatArray) -> FloatArray:
        if self.gamma is None:
            raise UnsolvedSurface("velocity requested before solve")
        x, y = self.panel_frames(point)
        u, v = _velocity_entries(x, y, self.lengths)
        scale = self.gamma / TWO_PI
        vec = (u * scale)[:, None] * self.tangents + (v * scale)[:, None] * self.normals
        return vec.sum(axis=0)


def to_panel_frame(surface: PanelSurface, panel_index: int, point: FloatArray) -> FloatArray:
    """Express a global point in panel `panel_index`'s local frame."""
    x, y = surface.panel_frames(point)
    return np.array([x[panel_index], y[panel_index]])


def _influence_entries(x: FloatArray, y: FloatArray, lengths: FloatArray) -> FloatArray:
    l1 = np.hypot(x, y)
    l2 = np.hypot(x - lengths, y)
    if np.any(l1 < ENDPOINT_GUARD) or np.any(l2 < ENDPOINT_GUARD):
        raise SingularQuery("query point touches a panel endpoint")
    w1 = np.arctan2(y, x)
    w2 = np.arctan2(y, x - lengths)
    return -(x * np.log(l2 / l1) - lengths * np.log(l2) + y * (w1 - w2)) / TWO_PI


def influence_coefficient(x: float, y: float, length: float) -> float:
    """Boundary-matrix entry of a unit-strength panel, panel-frame query.

    At the panel's own midpoint (length/2, 0) this evaluates to the
    analytic limit (length/2pi) ln(length/2).
    """
    if length <= MIN_PANEL_LENGTH:
        raise DegeneratePanel(f"panel length {length:.3e} below {MIN_PANEL_LENGTH:.0e}")
    out = _influence_entries(np.array([x]), np.array([y]), np.array([length]))
    return float(out[0])


def panel_stream_kernel(x: float, y: float, length: float) -> float:
    """Exact induced stream function of a unit-strength panel.

    Equals -(1/2pi) int_0^L ln(l(s)) ds = L/2pi - influence_coefficient.
    """
    return length / TWO_PI - influence_coefficient(x, y, length)


def _velocity_entries(x: FloatArray, y: FloatArray, lengths: FloatArray) -> tuple[FloatArray, FloatArray]:
    l1 = np.hypot(x, y)
    l2 = np.hypot(x - lengths, y)
    if np.any(l1 < ENDPOINT_GUARD) or np.any(l2 < ENDPOINT_GUARD):
        raise SingularQuery("velocity query touches a panel endpoint")
    u = np.arctan2(y, x) - np.arctan2(y, x - lengths)
    v = np.log(l1 / l2)
    return u, v


def panel_velocity(x: float, y: float, length: float, gamma: float = TWO_PI) -> FloatArray:
    """Velocity induced by one panel at a panel-frame point, panel frame.

    Component 0 is along the panel, component 1 along its left normal.
    On-panel queries return the limit from the left-normal side.
    """
    u, v = _velocity_entries(np.array([x]), np.array([y]), np.array([length]))
    return np.array([float(u[0]), float(v[0])]) * (gamma / TWO_PI)


# ---------------------------------------------------------------------------
# assembly and solves


@dataclass
class InfluenceSystem:
    """Assembled boundary matrix with its LU factors, reusable across solves."""

    surfaces: Sequence[PanelSurface]
    matrix: FloatArray
    rhs_elements: FloatArray
    spans: list[tuple[int, int]]
    condition: float
    _lu: tuple[FloatArray, FloatArray] = field(repr=False, default=None)  # type: ignore[assignment]

    def solve(self, rhs: FloatArray) -> FloatArray:
        return lu_solve(self._lu, rhs)

    def inverse(self) -> FloatArray:
        return lu_solve(self._lu, np.eye(self.matrix.shape[0]))


def _check_overlaps(surfaces: Sequence[PanelSurface]) -> None:
    starts = np.vstack([s.starts for s in surfaces])
    ends = np.vstack([s.vertices[1:] for s in surfaces])
    n = len(starts)
    if n < 2:
        return
    # proper segment intersection via orientation signs, all pairs at once
    d = ends - starts
    sx, sy = starts[:, 0], starts[:, 1]
    dx, dy = d[:, 0], d[:, 1]

    def cross_to(px: FloatArray, py: FloatArray) -> FloatArray:
        # orientation of points (px, py) relative to every segment, (n_pts, n_seg)
        return (px[:, None] - sx[None, :]) * dy[None, :] - (py[:, None] - sy[None, :]) * dx[None, :]

    # straddle[p, s] < 0 when the endpoints of segment p fall on opposite
    # sides of the line through segment s; a proper crossing needs both
    # straddle[i, j] and straddle[j, i] negative.
    straddle = cross_to(sx, sy) * cross_to(ends[:, 0], ends[:, 1])
    crossing = (straddle < -1e-18) & (straddle.T < -1e-18)
    # panels sharing a vertex (consecutive in one surface) never cross properly
    idx = np.triu_indices(n, k=1)
    if np.any(crossing[idx]):
        i, j = idx[0][crossing[idx]][0], idx[1][crossing[idx]][0]
        raise OverlappingPanels(f"panels {i} and {j} intersect")


def assemble(surfaces: Sequence[PanelSurface], elements: Iterable[FieldComponent]) -> InfluenceSystem:
    """Build the coupled boundary matrix and element stream values.

    Raises SingularSystem when the 1-norm condition estimate from the LU
    factors exceeds 1e12, and OverlappingPanels on crossing geometry.
    """
    surfaces = list(surfaces)
    if not surfaces:
        raise DegeneratePanel("no surfaces to assemble")
    _check_overlaps(surfaces)
    spans: list[tuple[int, int]] = []
    offset = 0
    for s in surfaces:
        spans.append((offset, offset + s.panel_count))
        offset += s.panel_count
    n = offset
    controls = np.vstack([s.control_points for s in surfaces])
    matrix = np.empty((n, n))
    col = 0
    for s in surfaces:
        for j in range(s.panel_count):
            d = controls - s.starts[j]
            x = d @ s.tangents[j]
            y = d @ s.normals[j]
            # own control point maps to (L/2, 0) exactly; the closed form
            # already equals the analytic self-influence limit there
            matrix[:, col] = _influence_entries(x, y, np.full(n, s.lengths[j]))
            col += 1
    rhs_elements = np.array(
        [sum(e.stream_value(c) for e in elements) for c in controls], dtype=float
    )
    lu, piv = lu_factor(matrix)
    anorm = np.abs(matrix).sum(axis=0).max()
    rcond, _ = dgecon(lu, anorm, norm="1")
    condition = math.inf if rcond == 0.0 else 1.0 / rcond
    if condition > CONDITION_LIMIT:
        raise SingularSystem(f"boundary matrix condition {condition:.3e} exceeds {CONDITION_LIMIT:.0e}")
    return InfluenceSystem(
        surfaces=surfaces,
        matrix=matrix,
        rhs_elements=rhs_elements,
        spans=spans,
        condition=condition,
        _lu=(lu, piv),
    )


def _rhs_prescribed(system: InfluenceSystem, psi_values: Sequence[float]) -> FloatArray:
    rhs = system.rhs_elements.copy()
    for (lo, hi), psi in zip(system.spans, psi_values):
        rhs[lo:hi] -= psi
    return rhs


def solve_prescribed_psi(
    system: InfluenceSystem, psi_values: float | Sequence[float]
) -> list[PanelSurface]:
    """Solve panel strengths for prescribed per-surface stream values."""
    if np.isscalar(psi_values):
        psi_values = [float(psi_values)] * len(system.surfaces)
    psi_values = list(psi_values)
    if len(psi_values) != len(system.surfaces):
        raise SingularSystem(
            f"{len(psi_values)} stream values for {len(system.surfaces)} surfaces"
        )
    rhs = _rhs_prescribed(system, psi_values)
    gamma = system.solve(rhs)
    _check_residual(system.matrix, gamma, rhs)
    for (lo, hi), s, psi in zip(system.spans, system.surfaces, psi_values):
        s.gamma = gamma[lo:hi].copy()
        s.psi_s = float(psi)
    return list(system.surfaces)


def solve_kutta(
    surfaces: Sequence[PanelSurface],
    elements: Iterable[FieldComponent],
    kutta_points: FloatArray | Sequence[FloatArray],
) -> list[PanelSurface]:
    """Solve strengths and per-surface stream values with trailing-edge rows.

    Each surface contributes its collocation rows plus one extra row placing
    its kutta point on the same streamline, closing the (N + M)-unknown
    system in gamma and psi_s.
    """
    elements = list(elements)
    system = assemble(surfaces, elements)
    kutta_arr = np.atleast_2d(np.asarray(kutta_points, dtype=float))
    m = len(system.surfaces)
    if kutta_arr.shape != (m, 2):
        raise SingularSystem(f"expected {m} kutta points, got shape {kutta_arr.shape}")
    for point in kutta_arr:
        for s in system.surfaces:
            if _point_near_surface(point, s, 1e-6):
                raise KuttaOnSurface(f"kutta point {point} lies on a panel")
    n = system.matrix.shape[0]
    full = np.zeros((n + m, n + m))
    full[:n, :n] = system.matrix
    rhs = np.zeros(n + m)
    rhs[:n] = system.rhs_elements
    for k, (lo, hi) in enumerate(system.spans):
        full[lo:hi, n + k] = 1.0
    for k, point in enumerate(kutta_arr):
        col = 0
        for s in system.surfaces:
            x, y = s.panel_frames(point)
            full[n + k, col : col + s.panel_count] = _influence_entries(x, y, s.lengths)
            col += s.panel_count
        full[n + k, n + k] = 1.0
        rhs[n + k] = sum(e.stream_value(point) for e in elements)
    try:
        lu, piv = lu_factor(full)
    except Exception as exc:  # LinAlgError on exact singularity
        raise SingularSystem(str(exc)) from exc
    anorm = np.abs(full).sum(axis=0).max()
    rcond, _ = dgecon(lu, anorm, norm="1")
    if rcond == 0.0 or 1.0 / rcond > CONDITION_LIMIT:
        raise SingularSystem("augmented kutta system is ill-conditioned")
    solution = lu_solve((lu, piv), rhs)
    _check_residual(full, solution, rhs)
    gamma = solution[:n]
    for k, ((lo, hi), s) in enumerate(zip(system.spans, system.surfaces)):
        s.gamma = gamma[lo:hi].copy()
        s.psi_s = float(solution[n + k])
    return list(system.surfaces)


def _check_residual(matrix: FloatArray, solution: FloatArray, rhs: FloatArray) -> None:
    residual = np.abs(matrix @ solution - rhs).max()
    scale = max(1.0, np.abs(rhs).max())
    if residual > RESIDUAL_TOL * scale:
        raise SingularSystem(f"solve residual {residual:.3e} above tolerance")


def _point_near_surface(point: FloatArray, surface: PanelSurface, tol: float) -> bool:
    d = point - surface.starts
    t = np.einsum("ij,ij->i", d, surface.tangents)
    t = np.clip(t, 0.0, surface.lengths)
    nearest = surface.starts + t[:, None] * surface.tangents
    dist = np.hypot(*(point - nearest).T)
    return bool(np.any(dist < tol))


def boundary_residual(
    surfaces: Sequence[PanelSurface], elements: Iterable[FieldComponent]
) -> float:
    """Recompute the discrete no-penetration residual of a solved scene.

    Re-assembles the boundary rows from scratch and evaluates
    |sum_j I_ij gamma_j + psi_s(i) - F_i| at every control point; this is
    the collocated form of v.n = 0 on the surface.
    """
    elements = list(elements)
    surfaces = list(surfaces)
    for s in surfaces:
        if s.gamma is None or s.psi_s is None:
            raise UnsolvedSurface("boundary_residual requires solved surfaces")
    system = assemble(surfaces, elements)
    gamma = np.concatenate([s.gamma for s in surfaces])
    psi = np.concatenate(
        [np.full(s.panel_count, s.psi_s) for s in surfaces]
    )
    return float(np.abs(system.matrix @ gamma + psi - system.rhs_elements).max())
