"""Two-step receding-horizon controller for shelf-proximal navigation.

Step one drives the unicycle base toward a shelf-relative target pose under
collision and orientation constraints; step two keeps the label marker inside
the camera field of view with input-smooth head motion, using the base stage's
predicted state sequence as a parameter.

Everything is expressed in a shelf-aligned local frame anchored off the label
marker: the two collision half-planes are literally x <= 0 (cart side) and
y <= 0 (shelf side) there. Those and the input boxes are hard constraints.
The orientation band is enforced softly through slack variables: a unicycle
cannot remove lateral error inside a narrow heading band, so a lateral
approach must be allowed to swing through it at a price.

A bare quadratic pose cost over a short horizon cannot stabilize a unicycle
from lateral offsets (the rotate-then-drive payoff lies beyond the horizon,
and the linearization at rest makes lateral error unobservable to the QP).
The stage references are therefore generated by rolling out a classical
polar-coordinate pose stabilization law toward the target; the optimizer
tracks that convergent reference under the hard constraints. At the target
the reference collapses to the target pose and the cost reduces to the plain
quadratic regulation form.

The nonlinear program is solved by successive linearization: linearize the
Euler unicycle model along the rollout of the current input sequence, solve
the condensed convex QP, repeat for a fixed pass budget (fewer passes when
warm-started, real-time iteration style). Linearizing about an exactly
rolled-out trajectory leaves zero affine defect, and the first predicted step
is exact in the input, so a feasible QP never commands the plant across a
hard constraint by more than the solver tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle
from .qp import QpInfeasible, solve_qp
from .sim import BaseInput, BasePose, step_base

CONTROL_DT = 0.05


@dataclass(frozen=True)
class BaseMpcConfig:
    horizon: int = 20
    T: float = CONTROL_DT
    Q: tuple[float, float, float] = (10.0, 10.0, 5.0)
    R: tuple[float, float] = (1.0, 1.0)
    v_max: float = 0.3
    # capped below the head's rate limit: marker bearing moves one-to-one with
    # base rotation, and the head must be able to out-turn it to hold the
    # field-of-view constraint
    omega_max: float = 0.7
    enforce_collision: bool = True
    theta_band: float = 0.1  # half-width of the orientation band around the target heading
    theta_weight: float = 1.0  # quadratic slack penalty on band violation
    collision_slack_weight: float = 1e4  # degraded-mode relaxation penalty
    terminal_weight: float = 20.0  # multiplier on Q for the horizon-end tracking error
    # per-tick input rate limits (hard rows). Besides modeling finite drive
    # acceleration, these keep the camera-frame marker dynamics inside what
    # the constant-velocity filter can track: an input step of du slews the
    # marker's camera coordinates by range * du in one tick, which otherwise
    # lands in the innovation gate.
    dv_max: float = 0.06
    domega_max: float = 0.15
    cold_passes: int = 5
    warm_passes: int = 2
    # polar guidance gains (k_alpha > k_rho > 0, k_beta < 0 for convergence)
    k_rho: float = 1.4
    k_alpha: float = 2.4
    k_beta: float = -1.8
    # inside this radius the bearing to the target is dominated by estimate
    # noise, so guidance hands over to plain target tracking (the QP polishes
    # the longitudinal and heading residuals; the lateral one is already at
    # the noise floor). The last-meter controller feeds the guidance a
    # smoothed estimate near the target, which is what lets this radius sit
    # below the raw estimate noise.
    align_radius: float = 0.008
    # distance at which the controller latches onto the smoothed estimate
    smoothing_radius: float = 0.05


@dataclass(frozen=True)
class HeadMpcConfig:
    horizon: int = 20
    T: float = CONTROL_DT
    K: tuple[float, float] = (1.0, 1.0)
    # small absolute-rate penalty (relative to K) so the smoothness optimum
    # decays to rest instead of coasting at the previous rate until a
    # field-of-view bound reflects it
    damping: float = 0.05
    pan_range: tuple[float, float] = (-3.9, 1.7)
    tilt_range: tuple[float, float] = (-1.5, 0.8)
    rate_max: float = 1.0
    fov_h: float = math.radians(69.0)
    fov_v: float = math.radians(42.0)
    fov_margin: float = math.radians(3.0)
    camera_height: float = 1.30
    slack_weight: float = 1e4


@dataclass
class MpcSolution:
    U: np.ndarray  # (N, m) optimal inputs
    X: np.ndarray  # (N+1, n) predicted states from the nonlinear rollout
    cost: float  # the quadratic stage cost of the solution w.r.t. the target
    objective: float  # minimized objective (reference tracking + terminal)
    iterations: int
    kkt_residual: float
    max_violation: float  # over hard linear constraint rows at the QP solution
    degraded: bool = False
    slack_max: float = 0.0

    def first_base_input(self) -> BaseInput:
        return BaseInput(float(self.U[0, 0]), float(self.U[0, 1]))


def rollout(x0: np.ndarray, U: np.ndarray, T: float) -> np.ndarray:
    X = np.empty((U.shape[0] + 1, 3))
    X[0] = x0
    pose = BasePose(*x0)
    for k in range(U.shape[0]):
        pose = step_base(pose, BaseInput(U[k, 0], U[k, 1]), T)
        X[k + 1] = (pose.x, pose.y, pose.theta)
    return X


def polar_guidance_step(pose, target, cfg: BaseMpcConfig) -> tuple[float, float]:
    """One step of the polar pose-stabilization law, jointly clamped to bounds.

    Drives forward or backward depending on where the goal lies, arcs in so
    the final heading matches the target, and rotates in place inside the
    alignment radius.
    """
    dx = target[0] - pose[0]
    dy = target[1] - pose[1]
    rho = math.hypot(dx, dy)
    if rho < cfg.align_radius:
        w = 2.0 * wrap_angle(target[2] - pose[2])
        return 0.0, max(-cfg.omega_max, min(cfg.omega_max, w))
    lam = math.atan2(dy, dx)
    alpha = wrap_angle(lam - pose[2])
    reverse = abs(alpha) > math.pi / 2 + 0.05
    if reverse:
        alpha = wrap_angle(lam + math.pi - pose[2])
        beta = wrap_angle(target[2] - lam - math.pi)
    else:
        beta = wrap_angle(target[2] - lam)
    v = cfg.k_rho * rho
    w = cfg.k_alpha * alpha + cfg.k_beta * beta
    if reverse:
        v = -v
    scale = min(1.0, cfg.v_max / max(abs(v), 1e-9), cfg.omega_max / max(abs(w), 1e-9))
    return v * scale, w * scale


def guidance_rollout(x0: np.ndarray, target: np.ndarray, cfg: BaseMpcConfig):
    """Reference trajectory and inputs from the guidance law, horizon long.

    Once the start is inside the alignment radius the references collapse to
    the target pose (the paper's plain regulation cost).
    """
    N = cfg.horizon
    if math.hypot(target[0] - x0[0], target[1] - x0[1]) < cfg.align_radius:
        return np.tile(np.asarray(target, dtype=float), (N + 1, 1)), np.zeros((N, 2))
    X = np.empty((N + 1, 3))
    U = np.empty((N, 2))
    X[0] = x0
    p = (float(x0[0]), float(x0[1]), float(x0[2]))
    for k in range(N):
        v, w = polar_guidance_step(p, target, cfg)
        p = (
            p[0] + cfg.T * v * math.cos(p[2]),
            p[1] + cfg.T * v * math.sin(p[2]),
            wrap_angle(p[2] + cfg.T * w),
        )
        U[k] = (v, w)
        X[k + 1] = p
    return X, U


def _sensitivities(X: np.ndarray, U: np.ndarray, T: float) -> np.ndarray:
    """Stacked map S: dU -> dX for predicted states 1..N (3N x 2N)."""
    N = U.shape[0]
    S = np.zeros((3 * N, 2 * N))
    prev = None
    for k in range(N):
        th = X[k, 2]
        v = U[k, 0]
        A = np.array(
            [[1.0, 0.0, -T * v * math.sin(th)], [0.0, 1.0, T * v * math.cos(th)], [0.0, 0.0, 1.0]]
        )
        B = np.array([[T * math.cos(th), 0.0], [T * math.sin(th), 0.0], [0.0, T]])
        blk = A @ prev if prev is not None else np.zeros((3, 2 * N))
        blk[:, 2 * k : 2 * k + 2] += B
        S[3 * k : 3 * k + 3] = blk
        prev = S[3 * k : 3 * k + 3]
    return S


def _as_ref_traj(ref, N: int) -> np.ndarray:
    ref = np.asarray(ref, dtype=float)
    if ref.ndim == 1:
        return np.tile(ref, (N + 1, 1))
    return ref


def true_cost(
    x0: np.ndarray,
    ref,
    cfg: BaseMpcConfig,
    U: np.ndarray,
    U_ref: np.ndarray | None = None,
) -> float:
    """The condensed objective: stage tracking + input deviation + terminal,
    evaluated along the exact nonlinear rollout. build_condensed linearizes
    exactly this function.
    """
    N = cfg.horizon
    Xr = _as_ref_traj(ref, N)
    Ur = np.zeros((N, 2)) if U_ref is None else U_ref
    Q, R = np.diag(cfg.Q), np.diag(cfg.R)
    X = rollout(x0, U, cfg.T)
    J = 0.0
    for i in range(1, N):
        e = X[i] - Xr[i]
        e[2] = wrap_angle(e[2])
        J += float(e @ Q @ e)
    eN = X[N] - Xr[N]
    eN[2] = wrap_angle(eN[2])
    J += cfg.terminal_weight * float(eN @ Q @ eN)
    for k in range(N):
        du = U[k] - Ur[k]
        J += float(du @ R @ du)
    return J


def stage_cost(x0: np.ndarray, target: np.ndarray, cfg: BaseMpcConfig, U: np.ndarray) -> float:
    """Quadratic stage cost of a solution with respect to the target pose."""
    Q, R = np.diag(cfg.Q), np.diag(cfg.R)
    X = rollout(x0, U, cfg.T)
    J = 0.0
    for i in range(cfg.horizon):
        e = X[i] - target
        e[2] = wrap_angle(e[2])
        J += float(e @ Q @ e + U[i] @ R @ U[i])
    return J


def build_condensed(
    x0: np.ndarray,
    ref,
    cfg: BaseMpcConfig,
    U: np.ndarray,
    U_ref: np.ndarray | None = None,
):
    """Linearize about the rollout of U and condense to a QP in dU.

    Returns (H, g, S, X) with objective J(dU) = dU'H dU + g'dU + const; g is
    the exact gradient of true_cost at U because the Jacobians of the Euler
    model are exact and the references are fixed parameters.
    """
    N = cfg.horizon
    Xr = _as_ref_traj(ref, N)
    Ur = np.zeros((N, 2)) if U_ref is None else U_ref
    Q, R = np.diag(cfg.Q), np.diag(cfg.R)
    X = rollout(x0, U, cfg.T)
    S = _sensitivities(X, U, cfg.T)
    H = np.zeros((2 * N, 2 * N))
    g = np.zeros(2 * N)
    for i in range(1, N):
        Si = S[3 * (i - 1) : 3 * (i - 1) + 3]
        e = X[i] - Xr[i]
        e[2] = wrap_angle(e[2])
        H += Si.T @ Q @ Si
        g += 2.0 * Si.T @ Q @ e
    SN = S[3 * (N - 1) : 3 * (N - 1) + 3]
    eN = X[N] - Xr[N]
    eN[2] = wrap_angle(eN[2])
    Qf = cfg.terminal_weight * Q
    H += SN.T @ Qf @ SN
    g += 2.0 * SN.T @ Qf @ eN
    for k in range(N):
        H[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] += R
        g[2 * k : 2 * k + 2] += 2.0 * R @ (U[k] - Ur[k])
    return H, g, S, X


def _base_qp_rows(cfg, X, U, S, target_theta, collision_slack, u_prev=None):
    """Constraint rows over w = [dU(2N), s_theta(N)] (+1 collision slack col)."""
    N = cfg.horizon
    nv = 3 * N + (1 if collision_slack else 0)
    n_box = 4 * N
    n_col = 2 * N if cfg.enforce_collision else 0
    n_rate = 4 * N if u_prev is not None else 4 * (N - 1)
    rows = np.zeros((n_box + n_col + n_rate + 3 * N + (1 if collision_slack else 0), nv))
    rhs = np.empty(rows.shape[0])
    hard = np.zeros(rows.shape[0], dtype=bool)
    r = 0
    bounds = (cfg.v_max, cfg.omega_max)
    for k in range(N):
        for j in range(2):
            rows[r, 2 * k + j] = 1.0
            rhs[r] = bounds[j] - U[k, j]
            hard[r] = True
            r += 1
            rows[r, 2 * k + j] = -1.0
            rhs[r] = bounds[j] + U[k, j]
            hard[r] = True
            r += 1
    # input rate limits: |u_k - u_{k-1}| <= du, anchored at the last applied
    # input when the caller supplies it
    rate = (cfg.dv_max, cfg.domega_max)
    for k in range(N):
        if k == 0 and u_prev is None:
            continue
        for j in range(2):
            base_val = U[k, j] - (u_prev[j] if k == 0 else U[k - 1, j])
            rows[r, 2 * k + j] = 1.0
            if k > 0:
                rows[r, 2 * (k - 1) + j] = -1.0
            rhs[r] = rate[j] - base_val
            hard[r] = True
            r += 1
            rows[r, 2 * k + j] = -1.0
            if k > 0:
                rows[r, 2 * (k - 1) + j] = 1.0
            rhs[r] = rate[j] + base_val
            hard[r] = True
            r += 1
    if cfg.enforce_collision:
        for i in range(1, N + 1):
            Si = S[3 * (i - 1) : 3 * (i - 1) + 3]
            for axis in (0, 1):
                rows[r, : 2 * N] = Si[axis]
                if collision_slack:
                    rows[r, -1] = -1.0
                rhs[r] = -X[i, axis]
                hard[r] = not collision_slack
                r += 1
    for i in range(1, N + 1):
        Si = S[3 * (i - 1) : 3 * (i - 1) + 3]
        dev = wrap_angle(X[i, 2] - target_theta)
        rows[r, : 2 * N] = Si[2]
        rows[r, 2 * N + i - 1] = -1.0
        rhs[r] = cfg.theta_band - dev
        r += 1
        rows[r, : 2 * N] = -Si[2]
        rows[r, 2 * N + i - 1] = -1.0
        rhs[r] = cfg.theta_band + dev
        r += 1
        rows[r, 2 * N + i - 1] = -1.0
        rhs[r] = 0.0
        r += 1
    if collision_slack:
        rows[r, -1] = -1.0
        rhs[r] = 0.0
        r += 1
    return rows, rhs, hard


def solve_base_mpc(
    pose: np.ndarray,
    target: np.ndarray,
    cfg: BaseMpcConfig,
    warm_start: np.ndarray | None = None,
    u_prev: np.ndarray | None = None,
) -> MpcSolution:
    """Solve the base stage from a pose estimate, both in the local frame.

    warm_start is the previous solution shifted one step; passing it reduces
    the linearization pass budget (real-time iteration). u_prev anchors the
    first-step input rate limit at the last applied input.
    """
    pose = np.asarray(pose, dtype=float)
    target = np.asarray(target, dtype=float)
    N = cfg.horizon
    Xr, Ur = guidance_rollout(pose, target, cfg)
    if warm_start is not None:
        U = np.asarray(warm_start, dtype=float).copy()
        passes = cfg.warm_passes
    else:
        U = Ur.copy()
        passes = cfg.cold_passes
    if u_prev is not None:
        u_prev = np.asarray(u_prev, dtype=float)

    degraded = False
    iters = 0
    kkt = 0.0
    max_viol = 0.0
    slack_max = 0.0
    for _ in range(max(1, passes)):
        H, g, S, X = build_condensed(pose, Xr, cfg, U, U_ref=Ur)
        nv = 3 * N
        G = np.zeros((nv, nv))
        G[: 2 * N, : 2 * N] = 2.0 * H
        G[2 * N :, 2 * N :] = 2.0 * cfg.theta_weight * np.eye(N)
        a = np.zeros(nv)
        a[: 2 * N] = g
        C, d, hard = _base_qp_rows(cfg, X, U, S, float(target[2]), collision_slack=False, u_prev=u_prev)
        try:
            res = solve_qp(G, a, C, d)
            w = res.x
        except QpInfeasible:
            degraded = True
            G2 = np.zeros((nv + 1, nv + 1))
            G2[:nv, :nv] = G
            G2[nv, nv] = 2.0 * cfg.collision_slack_weight
            a2 = np.zeros(nv + 1)
            a2[:nv] = a
            C, d, hard = _base_qp_rows(cfg, X, U, S, float(target[2]), collision_slack=True, u_prev=u_prev)
            res = solve_qp(G2, a2, C, d)
            w = res.x[:nv]
            slack_max = max(slack_max, float(res.x[-1]))
        iters += res.iterations
        kkt = res.kkt_residual
        viol = C @ res.x - d
        if np.any(hard):
            max_viol = max(max_viol, float(np.max(viol[hard], initial=0.0)))
        dU = w[: 2 * N].reshape(N, 2)
        slack_max = max(slack_max, float(np.max(w[2 * N : 3 * N], initial=0.0)))
        U = U + dU
        if float(np.max(np.abs(dU))) < 1e-10:
            break

    X = rollout(pose, U, cfg.T)
    return MpcSolution(
        U=U,
        X=X,
        cost=stage_cost(pose, target, cfg, U),
        objective=true_cost(pose, Xr, cfg, U, U_ref=Ur),
        iterations=iters,
        kkt_residual=kkt,
        max_violation=max_viol,
        degraded=degraded,
        slack_max=slack_max,
    )


def marker_bearings(
    X: np.ndarray,
    marker_xyz: np.ndarray,
    cfg: HeadMpcConfig,
    pan_ref: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-step pan and tilt angles that would center the marker, given the
    base stage's predicted states. Pan values are unwrapped near pan_ref so
    the linear constraints never straddle the angle seam.
    """
    N = X.shape[0] - 1
    pans = np.empty(N)
    tilts = np.empty(N)
    for i in range(1, N + 1):
        dx = marker_xyz[0] - X[i, 0]
        dy = marker_xyz[1] - X[i, 1]
        raw = math.atan2(dy, dx) - X[i, 2]
        pans[i - 1] = pan_ref + wrap_angle(raw - pan_ref)
        dist = math.hypot(dx, dy)
        tilts[i - 1] = math.atan2(marker_xyz[2] - cfg.camera_height, max(dist, 1e-6))
    return pans, tilts


def solve_head_mpc(
    head: np.ndarray,
    u_prev: np.ndarray,
    base_solution: MpcSolution,
    marker_xyz: np.ndarray,
    cfg: HeadMpcConfig,
) -> MpcSolution:
    """Input-smoothness head stage subject to joint, rate and field-of-view
    constraints. The marker bearing band is hard; it is softened with a logged
    slack only when the hard problem is infeasible, and the caller is expected
    to treat that as a recovery trigger.
    """
    head = np.asarray(head, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    N = cfg.horizon
    K = np.diag(cfg.K)
    D = np.zeros((2 * N, 2 * N))
    for k in range(N):
        D[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = np.eye(2)
        if k > 0:
            D[2 * k : 2 * k + 2, 2 * (k - 1) : 2 * k] = -np.eye(2)
    Kblk = np.kron(np.eye(N), K)
    H = D.T @ Kblk @ D + cfg.damping * Kblk
    g = np.zeros(2 * N)
    g[:2] = -2.0 * (K @ u_prev)

    pans, tilts = marker_bearings(base_solution.X, marker_xyz, cfg, pan_ref=float(head[0]))
    band_h = cfg.fov_h / 2.0 - cfg.fov_margin
    band_v = cfg.fov_v / 2.0 - cfg.fov_margin

    def state_row(i: int, axis: int, nv: int) -> np.ndarray:
        r = np.zeros(nv)
        for j in range(i):
            r[2 * j + axis] = cfg.T
        return r

    def build_rows(with_slack: bool):
        nv = 2 * N + (1 if with_slack else 0)
        rows, rhs, hard = [], [], []

        def add(r, b, h):
            rows.append(r)
            rhs.append(b)
            hard.append(h)

        for k in range(N):
            for axis in range(2):
                r = np.zeros(nv)
                r[2 * k + axis] = 1.0
                add(r, cfg.rate_max, True)
                r2 = np.zeros(nv)
                r2[2 * k + axis] = -1.0
                add(r2, cfg.rate_max, True)
        for i in range(1, N + 1):
            for axis, rng in ((0, cfg.pan_range), (1, cfg.tilt_range)):
                sr = state_row(i, axis, nv)
                add(sr.copy(), rng[1] - head[axis], True)
                add(-sr, head[axis] - rng[0], True)
            for axis, bearing, band in ((0, pans[i - 1], band_h), (1, tilts[i - 1], band_v)):
                sr = state_row(i, axis, nv)
                r = sr.copy()
                if with_slack:
                    r[-1] = -1.0
                add(r, bearing + band - head[axis], not with_slack)
                r2 = -sr
                if with_slack:
                    r2[-1] = -1.0
                add(r2, head[axis] - (bearing - band), not with_slack)
        if with_slack:
            r3 = np.zeros(nv)
            r3[-1] = -1.0
            add(r3, 0.0, False)
        return np.array(rows), np.array(rhs), np.array(hard)

    G = 2.0 * H + 1e-9 * np.eye(2 * N)
    C, d, hard = build_rows(False)
    degraded = False
    slack_max = 0.0
    try:
        res = solve_qp(G, g, C, d)
        U = res.x.reshape(N, 2)
    except QpInfeasible:
        degraded = True
        nv = 2 * N + 1
        G2 = np.zeros((nv, nv))
        G2[: 2 * N, : 2 * N] = G
        G2[-1, -1] = 2.0 * cfg.slack_weight
        a2 = np.zeros(nv)
        a2[: 2 * N] = g
        C, d, hard = build_rows(True)
        res = solve_qp(G2, a2, C, d)
        U = res.x[: 2 * N].reshape(N, 2)
        slack_max = float(res.x[-1])

    X = np.empty((N + 1, 2))
    X[0] = head
    for k in range(N):
        X[k + 1] = X[k] + cfg.T * U[k]
    cost = 0.0
    prev = u_prev
    for k in range(N):
        diff = U[k] - prev
        cost += float(diff @ K @ diff)
        prev = U[k]
    return MpcSolution(
        U=U,
        X=X,
        cost=cost,
        objective=cost,
        iterations=res.iterations,
        kkt_residual=res.kkt_residual,
        max_violation=res.max_violation,
        degraded=degraded,
        slack_max=slack_max,
    )


@dataclass
class NavResult:
    success: bool
    final_pos_error: float  # true plant error against the target, meters
    final_heading_error: float
    duration: float
    marker_lost: bool = False
    degraded: bool = False
    worst_plant_violation: float = -math.inf  # max of the collision coordinates reached


class LastMeterController:
    """Receding-horizon loop: marker KF at 30 Hz, base+head MPC re-solved every
    control tick, first input applied, warm-started from the shifted previous
    solution. Reports marker loss after the configured staleness so the
    planner can decide recovery.
    """

    def __init__(
        self,
        frame: "ApproachFrame",
        marker_world: np.ndarray,
        target_frame: np.ndarray,
        base_cfg: BaseMpcConfig,
        head_cfg: HeadMpcConfig,
        kf_cfg=None,
        loss_timeout: float = 0.5,
    ):
        from .estimation import KfConfig, MarkerFilter

        self.frame = frame
        self.marker_world = marker_world
        self.marker_frame = frame.point_to_frame(marker_world[:3, 3])
        self.target = np.asarray(target_frame, dtype=float)
        self.base_cfg = base_cfg
        self.head_cfg = head_cfg
        self.filter = MarkerFilter(kf_cfg or KfConfig())
        self.loss_timeout = loss_timeout
        self.warm: np.ndarray | None = None
        self.u_prev_head = np.zeros(2)
        self.u_prev_base = np.zeros(2)
        self.degraded = False
        # complementary smoothing: dead-reckon the commanded motion and
        # average only the (motion-free) discrepancy against the marker
        # estimate, so smoothing carries no tracking lag
        self._dead_reckon: np.ndarray | None = None
        self._ema_disc: np.ndarray | None = None
        self.ema_alpha = 0.12

    def on_sensor(self, obs, stamp: float) -> None:
        z = None if obs is None else obs.as_vector()
        self.filter.step(z, stamp)

    def lost(self, now: float) -> bool:
        return self.filter.state is None or self.filter.staleness(now) > self.loss_timeout

    def estimate(self, head_state) -> np.ndarray | None:
        """Base pose estimate in frame coordinates from the filtered marker."""
        from .estimation import robot_pose_from_marker
        from .sim import CameraConfig

        if self.filter.state is None:
            return None
        base = robot_pose_from_marker(
            self.filter.state.pose_vector(),
            self.marker_world,
            BasePose(0, 0, 0),
            head_state,
            CameraConfig(),
        )
        return self.frame.to_frame(base)

    def tick(self, head_state, now: float):
        """One receding-horizon step. Returns (BaseInput, head rates, est) or
        None when the marker has been lost beyond the staleness budget."""
        from .sim import HeadInput

        if self.lost(now):
            return None
        est = self.estimate(head_state)
        # the orientation part of the marker estimate jitters the recovered
        # position through a range lever; inside the alignment radius that
        # jitter dwarfs the remaining error, so the controller reads a
        # smoothed estimate there (the lag is harmless at creep speeds)
        err = est - self.target
        err[2] = wrap_angle(err[2])
        if self._ema_err is None:
            self._ema_err = err
        else:
            self._ema_err = self.ema_alpha * err + (1 - self.ema_alpha) * self._ema_err
        if math.hypot(err[0], err[1]) < self.base_cfg.smoothing_radius:
            self._endgame = True  # one-way latch: no flapping at the boundary
        if self._endgame:
            est = self.target + self._ema_err
            est[2] = wrap_angle(est[2])
        base_sol = solve_base_mpc(
            est, self.target, self.base_cfg, warm_start=self.warm, u_prev=self.u_prev_base
        )
        self.warm = np.vstack([base_sol.U[1:], base_sol.U[-1:]])
        self.u_prev_base = base_sol.U[0].copy()
        head_vec = np.array([head_state.pan, head_state.tilt])
        head_sol = solve_head_mpc(
            head_vec, self.u_prev_head, base_sol, self.marker_frame, self.head_cfg
        )
        self.u_prev_head = head_sol.U[0].copy()
        self.degraded = self.degraded or base_sol.degraded or head_sol.degraded
        return (
            base_sol.first_base_input(),
            HeadInput(float(head_sol.U[0, 0]), float(head_sol.U[0, 1])),
            est,
            base_sol,
        )


def run_last_meter(
    sim,
    frame: "ApproachFrame",
    marker_id: int,
    target_frame: np.ndarray,
    base_cfg: BaseMpcConfig | None = None,
    head_cfg: HeadMpcConfig | None = None,
    kf_cfg=None,
    pos_tol: float = 0.006,
    heading_tol: float = math.radians(0.5),
    dwell: float = 0.4,
    timeout: float = 25.0,
    ema_alpha: float = 0.25,
) -> NavResult:
    """Drive the simulator's base to a frame target with the two-step MPC.

    Terminates on a dwell of the smoothed estimated pose inside
    (pos_tol, heading_tol); the orientation component of the marker estimate
    jitters the recovered position through a range-length lever arm, so the
    success detector reads an exponential average rather than raw estimates.
    The returned errors are measured against the true plant state. The
    initial head pointing uses the arrival waypoint's pose, standing in for
    the store-scale navigator's coarse localization.
    """
    from .geometry import wrap_angle as _wrap
    from .sim import HeadInput, clamp

    base_cfg = base_cfg or BaseMpcConfig()
    head_cfg = head_cfg or HeadMpcConfig()
    target = np.asarray(target_frame, dtype=float)
    ctrl = LastMeterController(frame, sim.marker_transforms[marker_id], target, base_cfg, head_cfg, kf_cfg)

    def on_sensor(stamp: float) -> None:
        ctrl.on_sensor(sim.observe(marker_id=marker_id), stamp)

    sim.sensor_hooks.append(on_sensor)
    t0 = sim.time
    worst = -math.inf
    dwell_ticks = 0
    need_ticks = max(1, round(dwell / CONTROL_DT))
    success = False
    lost = False
    try:
        # acquisition: slew the head toward the marker's expected bearing
        m = ctrl.marker_world[:3, 3]
        lim = sim.params.limits
        for _ in range(int(4.0 / CONTROL_DT)):
            dx, dy = m[0] - sim.base.x, m[1] - sim.base.y
            bearing = _wrap(math.atan2(dy, dx) - sim.base.theta)
            cands = [bearing, bearing - 2 * math.pi, bearing + 2 * math.pi]
            reach = [c for c in cands if lim.pan_range[0] <= c <= lim.pan_range[1]]
            pan_t = min(reach, key=lambda c: abs(c - sim.head.pan)) if reach else bearing
            tilt_t = math.atan2(m[2] - sim.params.camera.height, max(math.hypot(dx, dy), 1e-6))
            if abs(pan_t - sim.head.pan) < 0.02 and abs(tilt_t - sim.head.tilt) < 0.02:
                if ctrl.filter.state is not None:
                    break
            sim.advance_control_period(
                head_in=HeadInput(
                    clamp(4.0 * (pan_t - sim.head.pan), -lim.head_rate_max, lim.head_rate_max),
                    clamp(4.0 * (tilt_t - sim.head.tilt), -lim.head_rate_max, lim.head_rate_max),
                )
            )
        ema = None
        while sim.time - t0 < timeout:
            out = ctrl.tick(sim.head, sim.time)
            if out is None:
                lost = True
                break
            base_in, head_in, est, _ = out
            sim.advance_control_period(base_in, head_in)
            p = frame.to_frame(sim.base)
            worst = max(worst, float(p[0]), float(p[1]))
            err = np.array([est[0] - target[0], est[1] - target[1], _wrap(est[2] - target[2])])
            ema = err if ema is None else ema_alpha * err + (1 - ema_alpha) * ema
            pos_err = math.hypot(ema[0], ema[1])
            head_err = abs(ema[2])
            dwell_ticks = dwell_ticks + 1 if (pos_err <= pos_tol and head_err <= heading_tol) else 0
            if dwell_ticks >= need_ticks:
                success = True
                break
    finally:
        sim.sensor_hooks.remove(on_sensor)

    p = frame.to_frame(sim.base)
    return NavResult(
        success=success,
        final_pos_error=math.hypot(p[0] - target[0], p[1] - target[1]),
        final_heading_error=abs(wrap_angle(p[2] - target[2])),
        duration=sim.time - t0,
        marker_lost=lost,
        degraded=ctrl.degraded,
        worst_plant_violation=worst,
    )


@dataclass
class ApproachFrame:
    """Shelf-aligned local frame: +x along the shelf face, +y into the shelf.

    The origin sits at the intersection of the two collision planes, so the
    hard constraints are literally x <= 0 and y <= 0 for the base center.
    """

    origin: tuple[float, float]
    yaw: float

    def to_frame(self, pose: BasePose) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pose.x - self.origin[0]
        dy = pose.y - self.origin[1]
        return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(pose.theta - self.yaw)])

    def from_frame(self, p) -> BasePose:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return BasePose(
            self.origin[0] + c * p[0] - s * p[1],
            self.origin[1] + s * p[0] + c * p[1],
            wrap_angle(p[2] + self.yaw),
        )

    def point_to_frame(self, xyz) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = xyz[0] - self.origin[0]
        dy = xyz[1] - self.origin[1]
        return np.array([c * dx + s * dy, -s * dx + c * dy, xyz[2]])
