"""From raw scan hits to a virtual rigid surface and its stream bounds.

The lidar sees only the near face of an obstacle.  That face is clustered,
ordered, thinned, then shifted toward the vehicle by a fraction of the
closest-hit distance so the panel surface sits between vehicle and
obstacle; a trailing-edge point extended past the last (most downstream)
vertex closes the system when a kutta-style solve is requested.

The stream-value bounds derive from the inverse K of the boundary matrix:
with D = L.K.1 and E = L.K.F,

    psi_0   = E / D
    psi_max = (|zeta_g| + E) / D
    psi_min = (-|zeta_g| + E) / D

so prescribing psi in {psi_min, psi_0, psi_max} realizes total vortex
strengths {+|zeta_g|, 0, -|zeta_g|}; any |xi| < 1 interpolation keeps the
surface circulation strictly weaker than the sink and the goal therefore
globally attracting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateSurface, RobotAtCentroid
from .flow_elements import FloatArray
from .panel_solver import InfluenceSystem

DEFAULT_MAX_PANELS = 40


@dataclass(frozen=True)
class SurfaceTransformParams:
    """Shift fraction mu, trailing-edge rotation kappa (rad), kutta offset (m)."""

    mu: float = 0.3
    kappa: float = 0.0
    l_kutta: float = 0.8

    def __post_init__(self) -> None:
        if self.mu <= 0.0:
            raise ConfigError(f"mu must be positive, got {self.mu}")
        if self.l_kutta <= 0.0:
            raise ConfigError(f"l_kutta must be positive, got {self.l_kutta}")


@dataclass(frozen=True)
class TransformedSurface:
    vertices: FloatArray
    kutta_point: FloatArray
    centroid: FloatArray


@dataclass(frozen=True)
class StreamBounds:
    psi_min: float
    psi_zero: float
    psi_max: float


def cluster_scan(
    points: FloatArray, gap_factor: float = 3.0, min_gap: float = 0.0
) -> list[FloatArray]:
    """Split bearing-ordered hits into clusters at large range gaps.

    A break is declared where the spacing between consecutive hits exceeds
    `gap_factor` times the median spacing.  The scan wraps around, so a
    small first/last gap merges the two end clusters.  `min_gap` keeps
    grazing-incidence spread on a single face from splitting it: spacings
    below it never break, whatever the median says.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return []
    if len(pts) == 1:
        return [pts]
    gaps = np.hypot(*(np.diff(pts, axis=0).T))
    threshold = max(gap_factor * float(np.median(gaps)), min_gap)
    breaks = np.nonzero(gaps > threshold)[0]
    clusters = [pts[lo:hi] for lo, hi in zip(np.r_[0, breaks + 1], np.r_[breaks + 1, len(pts)])]
    if len(clusters) > 1:
        wrap_gap = float(np.hypot(*(pts[0] - pts[-1])))
        if wrap_gap <= threshold:
            clusters[0] = np.vstack([clusters.pop(), clusters[0]])
    return clusters


def _uncross(poly: FloatArray, window: int = 8) -> FloatArray:
    """Repair noise-scale folds: reverse the sub-chain between crossing segments.

    Range noise on grazing rays exceeds the lateral spacing of neighbouring
    hits, so every global threading of such points carries occasional local
    folds.  Each reversal strictly shortens the polyline, so the sweep
    terminates; crossings farther apart than `window` are left to the
    assembly-stage geometry check.
    """
    pts = np.asarray(poly, dtype=float).copy()
    n = len(pts)
    for _ in range(n):
        fixed_any = False
        for i in range(n - 3):
            a0, a1 = pts[i], pts[i + 1]
            da = a1 - a0
            for j in range(i + 2, min(i + 2 + window, n - 1)):
                b0, b1 = pts[j], pts[j + 1]
                db = b1 - b0
                s1 = np.cross(da, b0 - a0) * np.cross(da, b1 - a0)
                s2 = np.cross(db, a0 - b0) * np.cross(db, a1 - b0)
                if s1 < -1e-18 and s2 < -1e-18:
                    pts[i + 1 : j + 1] = pts[i + 1 : j + 1][::-1]
                    da = pts[i + 1] - a0
                    fixed_any = True
        if not fixed_any:
            break
    return pts


def order_cluster(points: FloatArray, centroid: FloatArray, flow_direction: FloatArray) -> FloatArray:
    """Thread hits into a simple polyline with the most downstream point last.

    The primary ordering is by angle about the centroid, measured from the
    local flow direction with the branch cut placed downstream, where the
    (vehicle-facing, hence mostly upstream) hit arc has no points.  That
    sort degenerates on a nearly straight cluster: the centroid then lies
    on the curve itself and angular rank stops tracking arc position.  The
    input order and the principal-axis order are scored as well, and the
    threading with the shortest total length wins; a fold can only
    lengthen a polyline, so the minimum recovers the curve order.
    """
    pts = np.asarray(points, dtype=float)
    f = np.asarray(flow_direction, dtype=float)
    norm = np.hypot(f[0], f[1])
    f = np.array([1.0, 0.0]) if norm < 1e-12 else f / norm
    r = pts - np.asarray(centroid, dtype=float)
    ang = np.arctan2(f[0] * r[:, 1] - f[1] * r[:, 0], r @ f)
    ang = np.mod(ang, 2.0 * math.pi)
    candidates = [pts[np.argsort(ang, kind="stable")], pts]
    if len(pts) >= 3:
        axis = np.linalg.eigh(np.cov(r.T))[1][:, -1]
        candidates.append(pts[np.argsort(r @ axis, kind="stable")])

    def length(poly: FloatArray) -> float:
        return float(np.hypot(*(np.diff(poly, axis=0).T)).sum())

    out = _uncross(min(candidates, key=length))
    if len(out) >= 2 and out[0] @ f > out[-1] @ f:
        out = out[::-1]
    return out


def decimate(points: FloatArray, max_panels: int = DEFAULT_MAX_PANELS) -> FloatArray:
    """Thin an ordered polyline to at most max_panels panels.

    Keeps a subset of the original points closest to uniform arc-length
    stations; endpoints always survive.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) <= max_panels + 1:
        return pts
    seg = np.hypot(*(np.diff(pts, axis=0).T))
    arc = np.r_[0.0, np.cumsum(seg)]
    stations = np.linspace(0.0, arc[-1], max_panels + 1)
    idx = np.unique(np.searchsorted(arc, stations))
    idx = np.clip(idx, 0, len(pts) - 1)
    idx[0], idx[-1] = 0, len(pts) - 1
    return pts[np.unique(idx)]


def transform(
    scan_points: FloatArray, robot_position: FloatArray, params: SurfaceTransformParams
) -> TransformedSurface:
    """Shift an ordered hit polyline toward the robot and place the kutta point.

    The whole cluster moves rigidly by mu times the closest-hit distance
    along centroid->robot; the kutta point extends l_kutta past the final
    vertex along the trailing-edge direction rotated by kappa.
    """
    pts = np.asarray(scan_points, dtype=float).reshape(-1, 2)
    robot = np.asarray(robot_position, dtype=float)
    distinct = np.unique(np.round(pts, 9), axis=0)
    if len(distinct) < 2:
        raise DegenerateSurface(f"{len(distinct)} distinct scan points, need at least 2")
    centroid = pts.mean(axis=0)
    offset = robot - centroid
    dist = float(np.hypot(offset[0], offset[1]))
    if dist < 1e-9:
        raise RobotAtCentroid("vehicle sits on the cluster centroid")
    d_min = float(np.min(np.hypot(*(pts - robot).T)))
    shift = params.mu * d_min * offset / dist
    shifted = pts + shift
    edge = shifted[-1] - shifted[-2]
    edge_len = float(np.hypot(edge[0], edge[1]))
    if edge_len < 1e-12:
        raise DegenerateSurface("trailing edge has zero length")
    t_hat = edge / edge_len
    c, s = math.cos(params.kappa), math.sin(params.kappa)
    rotated = np.array([c * t_hat[0] - s * t_hat[1], s * t_hat[0] + c * t_hat[1]])
    kutta_point = shifted[-1] + params.l_kutta * rotated
    return TransformedSurface(vertices=shifted, kutta_point=kutta_point, centroid=centroid + shift)


def stream_bounds(system: InfluenceSystem, sink_strength: float) -> StreamBounds:
    """Stream-value interval whose interior keeps the sink dominant.

    Evaluated on the assembled (possibly multi-surface) system with one
    shared surface stream value; `sink_strength` is signed, only its
    magnitude enters.
    """
    zeta = abs(float(sink_strength))
    lengths = np.concatenate([s.lengths for s in system.surfaces])
    k_inv = system.inverse()
    lk = lengths @ k_inv
    denominator = float(lk.sum())
    if abs(denominator) < 1e-14:
        raise DegenerateSurface("stream-bound denominator vanished")
    e_term = float(lk @ system.rhs_elements)
    return StreamBounds(
        psi_min=(-zeta + e_term) / denominator,
        psi_zero=e_term / denominator,
        psi_max=(zeta + e_term) / denominator,
    )


def select_psi(bounds: StreamBounds, xi: float) -> float:
    """Map xi in (-1, 1) to a stream value strictly inside the bounds."""
    if not -1.0 < xi < 1.0:
        raise ConfigError(f"xi must lie in (-1, 1), got {xi}")
    return bounds.psi_zero + xi * 0.5 * (bounds.psi_max - bounds.psi_min)


def choose_side(
    robot_position: FloatArray,
    heading: float,
    cluster_centroid: FloatArray,
    xi_magnitude: float,
) -> float:
    """Signed xi: circulation set so the vehicle deflects away from the obstacle.

    Positive xi drives net clockwise surface circulation, which sweeps the
    oncoming flow down across the face, so it is the choice for an obstacle
    on the left of the heading; an obstacle on the right gets the mirrored
    counterclockwise choice, negative xi.  The mapping is stable mid-pass:
    while rounding a surface the centroid sits on the inside of the turn,
    so a re-vote returns the sign already being flown.  A dead-ahead
    centroid breaks the tie to the left deflection, negative xi.
    """
    d = np.asarray(cluster_centroid, dtype=float) - np.asarray(robot_position, dtype=float)
    bearing = math.atan2(d[1], d[0]) - heading
    bearing = math.atan2(math.sin(bearing), math.cos(bearing))
    magnitude = abs(float(xi_magnitude))
    return magnitude if bearing > 0.0 else -magnitude
