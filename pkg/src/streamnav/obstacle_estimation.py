"""Obstacle perception: ellipse extraction, adaptive filtering, prediction.

Each lidar cluster is summarized by its minimum-area bounding ellipse and
fed to a constant-acceleration Kalman filter whose state also carries the
ellipse shape (r_a, r_b, theta).  The filter adapts its noise matrices
from innovation and residual statistics; the blend factor alpha reacts to
shape fluctuation so noisy ellipse feedback slows the noise updates down
instead of exciting them.  Horizon prediction rolls the kinematic block
open loop and converts growing position covariance into an inflated
safety radius for the controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSurface, DimensionMismatch, IllConditionedInnovation
from .flow_elements import FloatArray

R_MIN_FLOOR = 0.05
_MVEE_TOL = 1e-12
_MVEE_MAX_ITER = 200_000
_COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# minimum bounding ellipse


@dataclass(frozen=True)
class EllipseObservation:
    """Minimum-area enclosing ellipse of one cluster, canonical orientation."""

    center: FloatArray
    semi_major: float
    semi_minor: float
    angle: float  # major-axis angle in [-pi/2, pi/2)

    @property
    def area(self) -> float:
        return math.pi * self.semi_major * self.semi_minor

    def contains(self, point: FloatArray, tol: float = 1e-7) -> bool:
        c, s = math.cos(self.angle), math.sin(self.angle)
        d = np.asarray(point, dtype=float) - self.center
        u = (c * d[0] + s * d[1]) / self.semi_major
        v = (-s * d[0] + c * d[1]) / self.semi_minor
        return u * u + v * v <= 1.0 + tol


def _wrap_angle(angle: float) -> float:
    return (angle + math.pi / 2.0) % math.pi - math.pi / 2.0


def _ellipse_from_shape(center: FloatArray, shape: FloatArray) -> EllipseObservation:
    """Convert a shape matrix {x: (x-c)^T A (x-c) <= 1} to axis form."""
    eigvals, eigvecs = np.linalg.eigh(shape)
    eigvals = np.maximum(eigvals, 1e-18)
    major_axis = eigvecs[:, 0]  # smallest eigenvalue -> longest axis
    return EllipseObservation(
        center=np.asarray(center, dtype=float),
        semi_major=float(1.0 / math.sqrt(eigvals[0])),
        semi_minor=float(1.0 / math.sqrt(eigvals[1])),
        angle=_wrap_angle(math.atan2(major_axis[1], major_axis[0])),
    )


def _degenerate_ellipse(pts: FloatArray, r_min_floor: float) -> EllipseObservation:
    """Rank-deficient clusters: a floored circle or a needle along the span."""
    span = pts.max(axis=0) - pts.min(axis=0)
    if np.hypot(span[0], span[1]) < 1e-9:
        return EllipseObservation(pts[0].copy(), r_min_floor, r_min_floor, 0.0)
    direction = span / np.hypot(span[0], span[1])
    t = (pts - pts[0]) @ direction
    lo, hi = float(t.min()), float(t.max())
    center = pts[0] + direction * (0.5 * (lo + hi))
    half = max(0.5 * (hi - lo), r_min_floor)
    if len(pts) == 2:
        # circle on the diameter of the two hits
        return EllipseObservation(center, half, half, 0.0)
    return EllipseObservation(center, half, r_min_floor, _wrap_angle(math.atan2(direction[1], direction[0])))


def fit_mbe(
    points: FloatArray, r_min_floor: float = R_MIN_FLOOR, tol: float = _MVEE_TOL
) -> EllipseObservation:
    """Minimum-area ellipse containing all points.

    Deterministic dual ascent with add/away steps on the lifted point set;
    the inverse moment matrix is carried along by rank-one updates and
    refreshed periodically against drift.  The final shape matrix is
    rescaled so containment holds exactly.  A single point yields the
    floor circle, two points the circle on their diameter, collinear
    clusters a needle with floored minor axis.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise DegenerateSurface("no points to bound")
    if len(pts) == 1:
        return EllipseObservation(pts[0].copy(), r_min_floor, r_min_floor, 0.0)
    centered = pts - pts.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    if len(pts) == 2 or singular[-1] < 1e-9 * max(1.0, singular[0]):
        return _degenerate_ellipse(pts, r_min_floor)

    n = len(pts)
    q = np.column_stack([pts, np.ones(n)])  # lifted points, (n, 3)
    u = np.full(n, 1.0 / n)
    d = 3.0
    m_inv = np.linalg.inv(q.T @ (u[:, None] * q))
    fresh = True
    exact = False
    steps_since_refresh = 0
    best_gap = math.inf
    last_improvement = 0
    for it in range(_MVEE_MAX_ITER):
        if exact or steps_since_refresh >= 512:
            u /= u.sum()
            m_inv = np.linalg.inv(q.T @ (u[:, None] * q))
            fresh = True
            steps_since_refresh = 0
        w = np.einsum("ij,ij->i", q @ m_inv, q)
        j_add = int(np.argmax(w))
        gap_add = w[j_add] - d
        support = u > 1e-16
        w_sup = np.where(support, w, np.inf)
        j_away = int(np.argmin(w_sup))
        gap_away = d - w[j_away]
        gap = max(gap_add, gap_away)
        if gap < 0.999 * best_gap:
            best_gap = gap
            last_improvement = it
        elif it - last_improvement > 1500:
            # roundoff floor on very eccentric clouds; the rescale below
            # still makes containment exact
            break
        if gap <= d * tol:
            if fresh:
                break
            # drift can fake convergence; verify and finish exactly
            exact = True
            continue
        if gap_add >= gap_away:
            beta = gap_add / (d * (w[j_add] - 1.0))
            u *= 1.0 - beta
            u[j_add] += beta
            m_inv /= 1.0 - beta
            v = m_inv @ q[j_add]
            m_inv -= np.outer(v, v) * (beta / (1.0 + beta * float(q[j_add] @ v)))
        else:
            kappa = w[j_away]
            cap = u[j_away] / (1.0 - u[j_away])
            beta = cap if kappa <= 1.0 else min((d - kappa) / (d * (kappa - 1.0)), cap)
            u *= 1.0 + beta
            u[j_away] = max(u[j_away] - beta, 0.0)
            m_inv /= 1.0 + beta
            v = m_inv @ q[j_away]
            denom = 1.0 - beta * float(q[j_away] @ v)
            if denom <= 1e-12:
                u /= u.sum()
                m_inv = np.linalg.inv(q.T @ (u[:, None] * q))
                steps_since_refresh = 0
                fresh = True
                continue
            m_inv += np.outer(v, v) * (beta / denom)
        fresh = False
        steps_since_refresh += 1
    center = u @ pts
    sigma = pts.T @ (u[:, None] * pts) - np.outer(center, center)
    shape = np.linalg.inv(sigma) / 2.0
    # exact containment: rescale so the farthest point sits on the boundary
    dev = pts - center
    radii = np.einsum("ij,jk,ik->i", dev, shape, dev)
    shape = shape / float(radii.max())
    return _ellipse_from_shape(center, shape)


# ---------------------------------------------------------------------------
# adaptive kinematic/shape filter


def _kinematic_transition(dim: int, dt: float) -> FloatArray:
    a = np.eye(3 * dim)
    for i in range(dim):
        a[i, dim + i] = dt
        a[i, 2 * dim + i] = 0.5 * dt * dt
        a[dim + i, 2 * dim + i] = dt
    return a


@dataclass
class AdaptiveFilter:
    """Constant-acceleration filter with optional ellipse-shape states.

    State layout: [p, v, a] of dimension `dim` each, then (r_a, r_b, theta)
    when shape feedback is enabled.  Measurements are [p, shape] or just p.
    """

    dim: int = 2
    with_shape: bool = True
    alpha_min: float = 0.7
    alpha_max: float = 1.0
    rho: float = 1.5
    x: FloatArray = field(default=None)  # type: ignore[assignment]
    p_cov: FloatArray = field(default=None)  # type: ignore[assignment]
    r_cov: FloatArray = field(default=None)  # type: ignore[assignment]
    q_cov: FloatArray = field(default=None)  # type: ignore[assignment]
    alpha: float = field(init=False)
    sigma_bar: FloatArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        d = self.dim
        self.n_states = 3 * d + (3 if self.with_shape else 0)
        self.n_meas = d + (3 if self.with_shape else 0)
        if self.x is None:
            self.x = np.zeros(self.n_states)
        if self.p_cov is None:
            diag = [0.25] * d + [1.0] * d + [1.0] * d
            if self.with_shape:
                diag += [0.04, 0.04, 0.1]
            self.p_cov = np.diag(diag).astype(float)
        if self.r_cov is None:
            diag = [2.5e-3] * d + ([1e-2, 1e-2, 1e-2] if self.with_shape else [])
            self.r_cov = np.diag(diag).astype(float)
        if self.q_cov is None:
            # the forgetting factor, not a fat process noise, absorbs
            # maneuvers; q must stay small enough to compound open loop
            # across a multi-second prediction horizon
            diag = [1e-4] * d + [1e-3] * d + [5e-3] * d
            if self.with_shape:
                diag += [1e-4, 1e-4, 1e-4]
            self.q_cov = np.diag(diag).astype(float)
        self.alpha = self.alpha_min
        if self.sigma_bar is None:
            self.sigma_bar = self.x[3 * d :].copy() if self.with_shape else np.zeros(3)
        self.h = np.zeros((self.n_meas, self.n_states))
        self.h[:d, :d] = np.eye(d)
        if self.with_shape:
            self.h[d:, 3 * d :] = np.eye(3)

    @classmethod
    def from_observation(cls, obs: EllipseObservation, **kwargs) -> "AdaptiveFilter":
        filt = cls(dim=2, with_shape=True, **kwargs)
        filt.x[:2] = obs.center
        filt.x[6:] = [obs.semi_major, obs.semi_minor, obs.angle]
        filt.sigma_bar = filt.x[6:].copy()
        return filt

    # -- core cycle ---------------------------------------------------------

    def predict(self, dt: float) -> None:
        a = self.transition(dt)
        self.x = a @ self.x
        self.p_cov = a @ self.p_cov @ a.T + self.q_cov
        self.p_cov = 0.5 * (self.p_cov + self.p_cov.T)

    def transition(self, dt: float) -> FloatArray:
        a = np.eye(self.n_states)
        a[: 3 * self.dim, : 3 * self.dim] = _kinematic_transition(self.dim, dt)
        return a

    def _innovation(self, z: FloatArray, x: FloatArray) -> FloatArray:
        err = np.asarray(z, dtype=float) - self.h @ x
        if self.with_shape:
            # orientation is periodic in pi, not 2 pi
            err[-1] = _wrap_angle(err[-1])
        return err

    def update(self, z: FloatArray) -> None:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_meas,):
            raise DimensionMismatch(f"measurement shape {z.shape}, expected ({self.n_meas},)")
        p_prior = self.p_cov
        x_prior = self.x
        innovation = self._innovation(z, x_prior)
        s = self.h @ p_prior @ self.h.T + self.r_cov
        if np.linalg.cond(s) > _COND_LIMIT:
            raise IllConditionedInnovation("innovation covariance is ill-conditioned")
        gain = p_prior @ self.h.T @ np.linalg.inv(s)
        self.x = x_prior + gain @ innovation
        joseph = np.eye(self.n_states) - gain @ self.h
        self.p_cov = joseph @ p_prior @ joseph.T + gain @ self.r_cov @ gain.T
        self.p_cov = 0.5 * (self.p_cov + self.p_cov.T)
        if self.with_shape:
            self.x[-1] = _wrap_angle(self.x[-1])
            self.x[-3] = max(self.x[-3], R_MIN_FLOOR)
            self.x[-2] = max(self.x[-2], R_MIN_FLOOR)
        # residual- and innovation-driven noise adaptation
        residual = self._innovation(z, self.x)
        blend = self.alpha
        self.r_cov = blend * self.r_cov + (1.0 - blend) * (
            np.outer(residual, residual) + self.h @ p_prior @ self.h.T
        )
        # keep the innovation covariance invertible under noise-free feeds
        floor = np.maximum(self.r_cov.diagonal(), 1e-8)
        np.fill_diagonal(self.r_cov, floor)
        correction = gain @ innovation
        self.q_cov = blend * self.q_cov + (1.0 - blend) * np.outer(correction, correction)
        if self.with_shape:
            shape = self.x[3 * self.dim :]
            self.sigma_bar = blend * self.sigma_bar + (1.0 - blend) * shape
            deviation = shape - self.sigma_bar
            deviation[2] = _wrap_angle(deviation[2])
            magnitude = float(np.linalg.norm(deviation))
        else:
            magnitude = 0.0
        self.alpha = self.alpha_min + (self.alpha_max - self.alpha_min) * (
            1.0 - math.exp(-self.rho * magnitude)
        )

    def step(self, z: FloatArray, dt: float) -> None:
        self.predict(dt)
        self.update(z)

    # -- accessors ----------------------------------------------------------

    @property
    def position(self) -> FloatArray:
        return self.x[: self.dim].copy()

    @property
    def velocity(self) -> FloatArray:
        return self.x[self.dim : 2 * self.dim].copy()

    @property
    def acceleration(self) -> FloatArray:
        return self.x[2 * self.dim : 3 * self.dim].copy()

    @property
    def shape_state(self) -> FloatArray:
        if not self.with_shape:
            raise DimensionMismatch("filter carries no shape states")
        return self.x[3 * self.dim :].copy()


# ---------------------------------------------------------------------------
# horizon rollout


@dataclass(frozen=True)
class HorizonPrediction:
    """Open-loop obstacle forecast over the controller horizon."""

    positions: FloatArray  # (N+1, dim)
    velocities: FloatArray
    accelerations: FloatArray
    inflated_safety: FloatArray  # (N+1,)


def nominal_kinematic_q(dim: int) -> FloatArray:
    """Design-time process noise for the kinematic block alone.

    The filter adapts its own q from corrections, which is right for the
    update cycle but poison for open-loop horizon growth: one bursty scan
    would balloon every keep-out radius downstream.  Horizon rollouts use
    this fixed matrix instead.
    """
    return np.diag([1e-4] * dim + [1e-3] * dim + [5e-3] * dim).astype(float)


def predict_horizon(
    filt: AdaptiveFilter,
    dt: float,
    n_steps: int,
    r_s: float,
    lambda0: float,
    q_horizon: FloatArray | None = None,
) -> HorizonPrediction:
    """Roll the kinematic block forward N steps with covariance growth.

    Node 0 is the current estimate; each later node applies the
    constant-acceleration transition and adds q_horizon, and the safety
    radius at node k is r_s + lambda0 * sqrt(lambda_max(P_pos(k))).
    """
    d = filt.dim
    kin = 3 * d
    a = _kinematic_transition(d, dt)
    if q_horizon is None:
        q_horizon = nominal_kinematic_q(d)
    x = filt.x[:kin].copy()
    p = filt.p_cov[:kin, :kin].copy()
    positions = np.empty((n_steps + 1, d))
    velocities = np.empty((n_steps + 1, d))
    accelerations = np.empty((n_steps + 1, d))
    inflated = np.empty(n_steps + 1)
    for k in range(n_steps + 1):
        if k > 0:
            x = a @ x
            p = a @ p @ a.T + q_horizon
        positions[k] = x[:d]
        velocities[k] = x[d : 2 * d]
        accelerations[k] = x[2 * d :]
        sigma_p = math.sqrt(max(float(np.linalg.eigvalsh(p[:d, :d])[-1]), 0.0))
        inflated[k] = r_s + lambda0 * sigma_p
    return HorizonPrediction(positions, velocities, accelerations, inflated)


# ---------------------------------------------------------------------------
# track table


@dataclass
class ObstacleTrack:
    track_id: int
    filt: AdaptiveFilter
    last_update: float
    hits: int = 1


class TrackTable:
    """Nearest-centroid association with stale-track expiry."""

    def __init__(
        self,
        gate_radius: float,
        expire_after: float = 1.0,
        filter_kwargs: dict | None = None,
    ) -> None:
        self.gate_radius = gate_radius
        self.expire_after = expire_after
        self.filter_kwargs = filter_kwargs or {}
        self.tracks: list[ObstacleTrack] = []
        self._next_id = 0

    def update(self, observations: list[EllipseObservation], now: float) -> None:
        """Associate one scan's ellipses to tracks, spawn and expire."""
        remaining = list(self.tracks)
        for obs in observations:
            best: ObstacleTrack | None = None
            best_dist = math.inf
            for track in remaining:
                dt = now - track.last_update
                predicted = track.filt.position + dt * track.filt.velocity
                dist = float(np.hypot(*(obs.center - predicted)))
                # the fitted center of a long surface leaps when the visible
                # arc changes, so the gate widens with the tracked extent
                gate = self.gate_radius + 0.5 * float(track.filt.shape_state[0])
                if dist < gate and dist < best_dist:
                    best, best_dist = track, dist
            z = np.r_[obs.center, obs.semi_major, obs.semi_minor, obs.angle]
            if best is None:
                filt = AdaptiveFilter.from_observation(obs, **self.filter_kwargs)
                self.tracks.append(ObstacleTrack(self._next_id, filt, now))
                self._next_id += 1
            else:
                best.filt.step(z, now - best.last_update)
                best.last_update = now
                best.hits += 1
                remaining.remove(best)
        self.tracks = [t for t in self.tracks if now - t.last_update <= self.expire_after]
