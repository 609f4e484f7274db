"""Reference tracking MPC with high-order barrier rows.

The vehicle model is a double integrator; multiple-shooting over N nodes
with the exact zero-order-hold discretization lets the states be
condensed out, so each SQP iteration solves a dense strictly convex QP in
the inputs and the constraint slacks.  The QP itself is solved by a
primal active-set method implemented here over dense matrices.

Safety rows come in two flavors.  The high-order form constrains, per
obstacle and node,

    -(dp/|dp|) . (u - a_obs)  <=  Upsilon(dp, dv) + sigma

where Upsilon collects the second-order barrier terms with linear class-K
gains beta1, beta2; relative degree two makes the input appear after two
derivatives of the distance barrier b = |dp| - r.  The plain Euclidean
form constrains |dp| >= r directly on the predicted positions.  Both are
slacked; slack costs are quadratic and heavy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, ZeroSeparation
from .flow_elements import FloatArray

DEFAULT_ITERATIONS = 3
KKT_TOL = 1e-6
_AS_TOL = 1e-10


@dataclass(frozen=True)
class HocbfParams:
    """Class-K gains and total keep-out radius for one barrier."""

    beta1: float
    beta2: float
    radius: float


def hocbf_terms(
    dp: FloatArray, dv: FloatArray, params: HocbfParams
) -> tuple[float, float, float, FloatArray]:
    """Barrier value, first-order term, Upsilon, and the input-facing row.

    Returns (b, gamma1, upsilon, gradient_row) with the constraint reading
    gradient_row . (u - a_obs) <= upsilon + sigma.
    """
    dp = np.asarray(dp, dtype=float)
    dv = np.asarray(dv, dtype=float)
    dist = float(np.linalg.norm(dp))
    if dist < 1e-9:
        raise ZeroSeparation("vehicle and obstacle centers coincide")
    b = dist - params.radius
    radial_speed = float(dp @ dv) / dist
    gamma1 = radial_speed + params.beta1 * b
    upsilon = (
        float(dv @ dv) / dist
        - (float(dp @ dv) ** 2) / dist**3
        + (params.beta1 + params.beta2) * radial_speed
        + params.beta1 * params.beta2 * b
    )
    return b, gamma1, upsilon, -dp / dist


def rk4_step(state: FloatArray, u: FloatArray, dt: float) -> FloatArray:
    """One RK4 step of (p_dot, v_dot) = (v, u); exact for this model."""
    def f(s: FloatArray) -> FloatArray:
        return np.r_[s[3:], u]

    k1 = f(state)
    k2 = f(state + 0.5 * dt * k1)
    k3 = f(state + 0.5 * dt * k2)
    k4 = f(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# problem statement


@dataclass(frozen=True)
class ObstacleForecast:
    """Per-node obstacle prediction feeding one row per input node.

    `radii` already includes the estimated obstacle extent plus the
    inflated safety margin.  `planar` drops the z-components from the
    relative state (cylindrical obstacles in the altitude-hold plane).
    """

    positions: FloatArray  # (N+1, 3)
    velocities: FloatArray
    accelerations: FloatArray
    radii: FloatArray  # (N+1,)
    euclidean: bool = False
    planar: bool = True


@dataclass
class OcpProblem:
    x0: FloatArray  # (6,) stacked position, velocity
    reference: FloatArray  # (N+1, 3) position reference
    reference_velocities: FloatArray | None = None  # (N+1, 3), zeros if omitted
    horizon: float = 5.0
    n_nodes: int = 25
    w_track: FloatArray = field(default_factory=lambda: np.diag([8.0, 8.0, 8.0]))
    w_velocity: FloatArray = field(default_factory=lambda: np.diag([2.0, 2.0, 2.0]))
    w_input: FloatArray = field(default_factory=lambda: np.diag([0.4, 0.4, 0.4]))
    w_terminal: FloatArray = field(default_factory=lambda: np.diag([12.0, 12.0, 12.0]))
    u_max: FloatArray = field(default_factory=lambda: np.full(3, 5.0))
    slack_weight: float = 1e5
    beta1: float = 4.0
    beta2: float = 4.0
    obstacles: list[ObstacleForecast] = field(default_factory=list)
    iterations: int = DEFAULT_ITERATIONS

    @property
    def dt(self) -> float:
        return self.horizon / self.n_nodes

    def stacked_reference(self) -> FloatArray:
        """Per-node [position, velocity] targets, flattened."""
        v_ref = (
            np.zeros_like(self.reference)
            if self.reference_velocities is None
            else self.reference_velocities
        )
        return np.hstack([self.reference, v_ref]).reshape(-1)


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class OcpSolution:
    states: FloatArray  # (N+1, 6)
    inputs: FloatArray  # (N, 3)
    slacks: FloatArray
    kkt_residual: float
    status: SolveStatus


# ---------------------------------------------------------------------------
# condensing


@dataclass(frozen=True)
class _Condensed:
    phi: FloatArray  # (6(N+1), 6)
    psi: FloatArray  # (6(N+1), 3N)
    a_d: FloatArray
    b_d: FloatArray


_condensed_cache: dict[tuple[int, float], _Condensed] = {}


def _condense(n: int, dt: float) -> _Condensed:
    key = (n, round(dt, 12))
    hit = _condensed_cache.get(key)
    if hit is not None:
        return hit
    a_d = np.eye(6)
    a_d[:3, 3:] = dt * np.eye(3)
    b_d = np.vstack([0.5 * dt * dt * np.eye(3), dt * np.eye(3)])
    phi = np.zeros((6 * (n + 1), 6))
    psi = np.zeros((6 * (n + 1), 3 * n))
    phi[:6] = np.eye(6)
    power = np.eye(6)
    for k in range(1, n + 1):
        power = a_d @ power
        phi[6 * k : 6 * k + 6] = power
        for j in range(k):
            # A^(k-1-j) B
            block = np.linalg.matrix_power(a_d, k - 1 - j) @ b_d
            psi[6 * k : 6 * k + 6, 3 * j : 3 * j + 3] = block
    out = _Condensed(phi=phi, psi=psi, a_d=a_d, b_d=b_d)
    _condensed_cache[key] = out
    return out


def rollout(x0: FloatArray, inputs: FloatArray, dt: float) -> FloatArray:
    """Shooting trajectory for given inputs, exact discretization."""
    n = len(inputs)
    cm = _condense(n, dt)
    flat = cm.phi @ x0 + cm.psi @ inputs.reshape(-1)
    return flat.reshape(n + 1, 6)


# ---------------------------------------------------------------------------
# dense primal active-set QP


def solve_qp(
    h_mat: FloatArray,
    c_vec: FloatArray,
    g_mat: FloatArray,
    h_vec: FloatArray,
    z0: FloatArray,
    max_iter: int = 400,
) -> tuple[FloatArray, FloatArray, list[int]]:
    """Minimize 0.5 z'Hz + c'z subject to Gz <= h from a feasible z0.

    Returns the solution, a dense multiplier vector, and the final active
    set.  H must be positive definite; the caller guarantees feasibility
    of z0.
    """
    n = len(c_vec)
    factor = cho_factor(h_mat)
    z = z0.astype(float).copy()
    active: list[int] = []
    lam_full = np.zeros(len(h_vec))
    for _ in range(max_iter):
        grad = h_mat @ z + c_vec
        if active:
            g_a = g_mat[active]
            hg = cho_solve(factor, grad)
            hga = cho_solve(factor, g_a.T)
            schur = g_a @ hga
            try:
                lam = np.linalg.solve(schur, -g_a @ hg)
            except np.linalg.LinAlgError:
                # numerically dependent active rows; least squares keeps
                # the step defined and the dependent multiplier split
                lam, *_ = np.linalg.lstsq(schur, -g_a @ hg, rcond=None)
            p = -hg - hga @ lam
        else:
            lam = np.zeros(0)
            p = -cho_solve(factor, grad)
        if np.abs(p).max(initial=0.0) < _AS_TOL:
            if len(lam) == 0 or lam.min() >= -_AS_TOL:
                lam_full[:] = 0.0
                lam_full[active] = np.maximum(lam, 0.0)
                return z, lam_full, active
            active.pop(int(np.argmin(lam)))
            continue
        # largest feasible step toward z + p
        inactive = [i for i in range(len(h_vec)) if i not in active]
        alpha = 1.0
        blocker = -1
        if inactive:
            g_i = g_mat[inactive]
            denom = g_i @ p
            numer = h_vec[inactive] - g_i @ z
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(denom > _AS_TOL, numer / denom, np.inf)
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha = max(float(ratios[j]), 0.0)
                blocker = inactive[j]
        z = z + alpha * p
        if blocker >= 0:
            active.append(blocker)
    # iteration budget exhausted; lam above may predate the last set edit,
    # so recompute multipliers for the set actually being returned
    lam_full[:] = 0.0
    if active:
        g_a = g_mat[active]
        grad = h_mat @ z + c_vec
        hga = cho_solve(factor, g_a.T)
        lam, *_ = np.linalg.lstsq(g_a @ hga, -g_a @ cho_solve(factor, grad), rcond=None)
        lam_full[active] = np.maximum(lam, 0.0)
    return z, lam_full, active


# ---------------------------------------------------------------------------
# row linearization


def _row_terms(
    prob: OcpProblem, x_bar: FloatArray, u_bar: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """Linearized safety rows at the shooting trajectory x_bar, u_bar.

    Returns (jac_x, jac_u, g0, node_index) stacked over (obstacle, node)
    rows; jacobians are (rows, 6) and (rows, 3).
    """
    n = prob.n_nodes
    rows = len(prob.obstacles) * n
    jac_x = np.zeros((rows, 6))
    jac_u = np.zeros((rows, 3))
    g0 = np.zeros(rows)
    nodes = np.zeros(rows, dtype=int)
    r = 0
    for obs in prob.obstacles:
        for k in range(n):
            dp = x_bar[k, :3] - obs.positions[k]
            dv = x_bar[k, 3:] - obs.velocities[k]
            if obs.planar:
                dp = dp.copy()
                dv = dv.copy()
                dp[2] = 0.0
                dv[2] = 0.0
            dist = float(np.linalg.norm(dp))
            if dist < 1e-9:
                raise ZeroSeparation("predicted vehicle node inside obstacle center")
            radius = float(obs.radii[k])
            if obs.euclidean:
                # r - |dp| <= sigma, linearized in position
                n_hat = dp / dist
                g0[r] = radius - dist
                jac_x[r, :3] = -n_hat
                if obs.planar:
                    jac_x[r, 2] = 0.0
            else:
                params = HocbfParams(prob.beta1, prob.beta2, radius)
                _, _, upsilon, grad_row = hocbf_terms(dp, dv, params)
                da = u_bar[k] - obs.accelerations[k]
                if obs.planar:
                    da = da.copy()
                    da[2] = 0.0
                g0[r] = float(grad_row @ da) - upsilon
                jac_u[r] = grad_row
                jac_x[r] = _hocbf_state_jacobian(dp, dv, da, prob.beta1, prob.beta2)
                if obs.planar:
                    jac_x[r, 2] = jac_x[r, 5] = 0.0
                    jac_u[r, 2] = 0.0
            nodes[r] = k
            r += 1
    return jac_x, jac_u, g0, nodes


def _hocbf_state_jacobian(
    dp: FloatArray, dv: FloatArray, da: FloatArray, beta1: float, beta2: float
) -> FloatArray:
    """d/d(dp, dv) of [-(dp/|dp|).da - Upsilon], analytic."""
    s = float(np.linalg.norm(dp))
    n_hat = dp / s
    q = float(dp @ dv)
    w = float(dv @ dv)
    bsum = beta1 + beta2
    bprod = beta1 * beta2
    d_ups_dp = (
        -(w / s**2) * n_hat
        - (2.0 * q / s**3) * dv
        + (3.0 * q**2 / s**4) * n_hat
        + bsum * (dv / s - (q / s**2) * n_hat)
        + bprod * n_hat
    )
    d_ups_dv = 2.0 * dv / s - (2.0 * q / s**3) * dp + bsum * dp / s
    d_dir_dp = -((np.eye(3) - np.outer(n_hat, n_hat)) / s) @ da
    return np.r_[d_dir_dp - d_ups_dp, -d_ups_dv]


# ---------------------------------------------------------------------------
# SQP solve


def build(prob: OcpProblem) -> dict:
    """Condensed cost pieces reused across the SQP iterations."""
    n = prob.n_nodes
    cm = _condense(n, prob.dt)
    w_bar = np.zeros((6 * (n + 1), 6 * (n + 1)))
    for k in range(n + 1):
        w_k = prob.w_terminal if k == n else prob.w_track
        w_bar[6 * k : 6 * k + 3, 6 * k : 6 * k + 3] = w_k
        w_bar[6 * k + 3 : 6 * k + 6, 6 * k + 3 : 6 * k + 6] = prob.w_velocity
    g_bar = np.kron(np.eye(n), prob.w_input)
    h_uu = 2.0 * (cm.psi.T @ w_bar @ cm.psi + g_bar)
    return {
        "cm": cm,
        "w_bar": w_bar,
        "g_bar": g_bar,
        "h_uu": h_uu,
    }


def tracking_cost(prob: OcpProblem, inputs: FloatArray) -> float:
    """Nonlinear-programming objective without slack terms, for checks."""
    states = rollout(prob.x0, inputs, prob.dt)
    v_ref = (
        np.zeros_like(prob.reference)
        if prob.reference_velocities is None
        else prob.reference_velocities
    )
    cost = 0.0
    for k in range(prob.n_nodes + 1):
        err = states[k, :3] - prob.reference[k]
        verr = states[k, 3:] - v_ref[k]
        w_k = prob.w_terminal if k == prob.n_nodes else prob.w_track
        cost += float(err @ w_k @ err) + float(verr @ prob.w_velocity @ verr)
        if k < prob.n_nodes:
            cost += float(inputs[k] @ prob.w_input @ inputs[k])
    return cost


def tracking_gradient(prob: OcpProblem, inputs: FloatArray) -> FloatArray:
    """Exact gradient of `tracking_cost` in the stacked inputs."""
    pieces = build(prob)
    u = inputs.reshape(-1)
    resid = pieces["cm"].phi @ prob.x0 + pieces["cm"].psi @ u - prob.stacked_reference()
    return 2.0 * (
        pieces["cm"].psi.T @ (pieces["w_bar"] @ resid) + pieces["g_bar"] @ u
    )


def solve(prob: OcpProblem, warm_inputs: FloatArray | None = None) -> OcpSolution:
    """SQP with a fixed small iteration budget (real-time style)."""
    n = prob.n_nodes
    if prob.reference.shape != (n + 1, 3):
        raise DimensionMismatch(f"reference shape {prob.reference.shape}, expected {(n + 1, 3)}")
    for obs in prob.obstacles:
        if obs.positions.shape != (n + 1, 3):
            raise DimensionMismatch("obstacle forecast does not span the horizon")
    pieces = build(prob)
    cm = pieces["cm"]
    n_u = 3 * n
    n_rows = len(prob.obstacles) * n
    u_bar = np.zeros((n, 3)) if warm_inputs is None else warm_inputs.copy()
    c_u_const = cm.psi.T @ (pieces["w_bar"] @ (cm.phi @ prob.x0 - prob.stacked_reference()))

    h_full = np.zeros((n_u + n_rows, n_u + n_rows))
    h_full[:n_u, :n_u] = pieces["h_uu"]
    h_full[n_u:, n_u:] = 2.0 * prob.slack_weight * np.eye(n_rows)
    h_full[np.diag_indices_from(h_full)] += 1e-9
    c_full = np.zeros(n_u + n_rows)
    c_full[:n_u] = 2.0 * c_u_const

    # static rows: input box, slack nonnegativity
    box = np.zeros((2 * n_u, n_u + n_rows))
    box[:n_u, :n_u] = np.eye(n_u)
    box[n_u:, :n_u] = -np.eye(n_u)
    box_rhs = np.r_[np.tile(prob.u_max, n), np.tile(prob.u_max, n)]
    nonneg = np.zeros((n_rows, n_u + n_rows))
    nonneg[:, n_u:] = -np.eye(n_rows)

    z = None
    lam = np.zeros(0)
    g_all = np.vstack([box, nonneg]) if n_rows else box
    rhs_all = np.r_[box_rhs, np.zeros(n_rows)] if n_rows else box_rhs
    for _ in range(max(1, prob.iterations)):
        x_bar = rollout(prob.x0, u_bar, prob.dt)
        if n_rows:
            jac_x, jac_u, g0, nodes = _row_terms(prob, x_bar, u_bar)
            rows = np.zeros((n_rows, n_u + n_rows))
            rhs = np.zeros(n_rows)
            for r in range(n_rows):
                k = nodes[r]
                su_k = cm.psi[6 * k : 6 * k + 6]
                coeff = jac_x[r] @ su_k
                coeff = coeff.copy()
                coeff[3 * k : 3 * k + 3] += jac_u[r]
                rows[r, :n_u] = coeff
                rows[r, n_u + r] = -1.0
                rhs[r] = -g0[r] + float(coeff @ u_bar.reshape(-1))
            g_all = np.vstack([box, nonneg, rows])
            rhs_all = np.r_[box_rhs, np.zeros(n_rows), rhs]
        # feasible start: clipped previous inputs, slacks absorbing violations
        u_start = np.clip(u_bar.reshape(-1), -np.tile(prob.u_max, n), np.tile(prob.u_max, n))
        z0 = np.r_[u_start, np.zeros(n_rows)]
        if n_rows:
            viol = g_all[2 * n_u + n_rows :] @ z0 - rhs_all[2 * n_u + n_rows :]
            z0[n_u:] = np.maximum(viol, 0.0) + 1.0
        z, lam, _ = solve_qp(h_full, c_full, g_all, rhs_all, z0)
        u_bar = z[:n_u].reshape(n, 3)

    slacks = z[n_u:] if n_rows else np.zeros(0)
    states = rollout(prob.x0, u_bar, prob.dt)
    stationarity = float(np.abs(h_full @ z + c_full + g_all.T @ lam).max())
    primal = float(np.maximum(g_all @ z - rhs_all, 0.0).max(initial=0.0))
    comp = float(np.abs(lam * (g_all @ z - rhs_all)).max(initial=0.0))
    nl_violation = 0.0
    if n_rows:
        jac_x, jac_u, g0, nodes = _row_terms(prob, states, u_bar)
        nl_violation = float(np.maximum(g0 - slacks, 0.0).max(initial=0.0))
    kkt = max(stationarity, primal, comp, nl_violation)
    status = SolveStatus.OPTIMAL if kkt < KKT_TOL else SolveStatus.MAX_ITER
    return OcpSolution(states=states, inputs=u_bar, slacks=slacks, kkt_residual=kkt, status=status)


# ---------------------------------------------------------------------------
# trace reconstruction


def gamma_traces(
    rel_positions: FloatArray,
    rel_velocities: FloatArray,
    radius: float | FloatArray,
    beta1: float,
    beta2: float,
) -> tuple[FloatArray, FloatArray]:
    """Barrier and first-order traces along a logged run, one obstacle.

    `rel_positions`/`rel_velocities` are (T, 2 or 3) vehicle-minus-obstacle
    series; radius may vary per sample.
    """
    rel_p = np.asarray(rel_positions, dtype=float)
    rel_v = np.asarray(rel_velocities, dtype=float)
    radii = np.broadcast_to(np.asarray(radius, dtype=float), rel_p.shape[:1])
    dist = np.linalg.norm(rel_p, axis=1)
    if np.any(dist < 1e-9):
        raise ZeroSeparation("logged state passes through the obstacle center")
    b = dist - radii
    radial = np.einsum("ij,ij->i", rel_p, rel_v) / dist
    return b, radial + beta1 * b
