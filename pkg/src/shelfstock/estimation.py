"""Constant-velocity Kalman filter over a 6-DoF marker pose.

State (14): [p(3), q(4), pdot(3), qdot(4)], tracked in the camera frame.
The quaternion is filtered linearly and renormalized after every update; the
measurement quaternion is flipped onto the estimate's hemisphere first so the
linear update never straddles the double cover.

A = [[I7, dt*I7], [0, I7]], B = 0 (no control input is fed to the filter),
H = [I7 | 0] extracts the observed pose block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_to_matrix, se3, se3_inv, yaw_of
from .sim import BasePose, CameraConfig, HeadState, camera_transform

POSE_DIM = 7
STATE_DIM = 14

# squared-Mahalanobis gate on the 7-dim innovation (chi-square, 7 DoF)
DEFAULT_GATE = 13.0


def _default_Q(dt: float) -> np.ndarray:
    # Process noise as continuous-time intensities discretized by dt. The
    # position blocks are cool so a static marker smooths >= 2x below raw
    # measurement RMSE; the quaternion-velocity block runs hot because head
    # pan and base rotation sweep the camera-frame orientation far faster
    # than the translation changes, and a lagging orientation estimate turns
    # straight into heading error through the pose chain. Tunables.
    q = np.zeros(STATE_DIM)
    q[:POSE_DIM] = 1e-5 * dt
    q[POSE_DIM : POSE_DIM + 3] = 1e-3 * dt
    q[POSE_DIM + 3 :] = 3e-2 * dt
    return np.diag(q)


def _default_R() -> np.ndarray:
    sigma_pos = 0.005
    sigma_rot = 0.02
    r = np.empty(POSE_DIM)
    r[:3] = sigma_pos**2
    r[3:] = sigma_rot**2
    return np.diag(r)


def _default_P0() -> np.ndarray:
    p = np.empty(STATE_DIM)
    p[:3] = 0.01
    p[3:POSE_DIM] = 0.01
    p[POSE_DIM : POSE_DIM + 3] = 0.25
    p[POSE_DIM + 3 :] = 0.25
    return np.diag(p)


@dataclass
class KfConfig:
    dt: float = 1.0 / 30.0
    Q: np.ndarray = None
    R: np.ndarray = None
    P0: np.ndarray = None
    gate: float = DEFAULT_GATE
    # a hard gate starves the filter after any model-mismatch transient, so a
    # run of rejections forces the next measurement through
    max_consecutive_rejections: int = 3

    def __post_init__(self):
        if self.Q is None:
            self.Q = _default_Q(self.dt)
        if self.R is None:
            self.R = _default_R()
        if self.P0 is None:
            self.P0 = _default_P0()
        self.A = np.eye(STATE_DIM)
        self.A[:POSE_DIM, POSE_DIM:] = self.dt * np.eye(POSE_DIM)
        self.H = np.zeros((POSE_DIM, STATE_DIM))
        self.H[:, :POSE_DIM] = np.eye(POSE_DIM)


@dataclass
class KfState:
    x: np.ndarray  # (14,)
    P: np.ndarray  # (14, 14)
    rejected: int = 0  # gated-out measurement count, diagnostics only
    consecutive_rejected: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def quaternion(self) -> np.ndarray:
        return self.x[3:7]

    def pose_vector(self) -> np.ndarray:
        return self.x[:POSE_DIM].copy()


def _renormalize_quat(x: np.ndarray, q_prev: np.ndarray | None) -> None:
    q = x[3:7]
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise FloatingPointError("quaternion estimate collapsed to zero")
    q /= n
    # keep sign continuity with the previous estimate (double-cover hygiene)
    ref = q_prev if q_prev is not None else np.array([0.0, 0.0, 0.0, 1.0])
    if float(q @ ref) < 0.0:
        x[3:7] = -q
        x[10:14] = -x[10:14]


def kf_init(z0: np.ndarray, cfg: KfConfig) -> KfState:
    """Start the filter at the first detection: pose copied, velocities zero."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (POSE_DIM,):
        raise ValueError(f"measurement must be length {POSE_DIM}")
    if abs(np.linalg.norm(z0[3:7]) - 1.0) > 1e-6:
        raise ValueError("measurement quaternion is not unit-norm")
    x = np.zeros(STATE_DIM)
    x[:POSE_DIM] = z0
    if x[6] < 0.0:
        x[3:7] = -x[3:7]
    return KfState(x=x, P=cfg.P0.copy())


def kf_predict(state: KfState, cfg: KfConfig) -> KfState:
    x = cfg.A @ state.x
    P = cfg.A @ state.P @ cfg.A.T + cfg.Q
    P = 0.5 * (P + P.T)
    return KfState(x=x, P=P, rejected=state.rejected, consecutive_rejected=state.consecutive_rejected)


def kf_update(state: KfState, z: np.ndarray, cfg: KfConfig) -> KfState:
    """Standard KF update on all 14 states, then quaternion renormalization.

    Measurements whose squared Mahalanobis innovation distance exceeds the gate
    are rejected outright (returned state only bumps the rejection counter), so
    a single bad detection cannot corrupt docking or navigation.
    """
    z = np.asarray(z, dtype=float).copy()
    if float(z[3:7] @ state.x[3:7]) < 0.0:
        z[3:7] = -z[3:7]
    innovation = z - cfg.H @ state.x
    S = cfg.H @ state.P @ cfg.H.T + cfg.R
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(
            f"singular innovation covariance; P diag = {np.diag(state.P)!r}"
        ) from exc
    gated = cfg.gate is not None and float(innovation @ S_inv @ innovation) > cfg.gate
    if gated and state.consecutive_rejected < cfg.max_consecutive_rejections:
        x = state.x.copy()
        _renormalize_quat(x, state.x[3:7])
        return KfState(
            x=x,
            P=state.P.copy(),
            rejected=state.rejected + 1,
            consecutive_rejected=state.consecutive_rejected + 1,
        )
    K = state.P @ cfg.H.T @ S_inv
    x = state.x + K @ innovation
    P = (np.eye(STATE_DIM) - K @ cfg.H) @ state.P
    P = 0.5 * (P + P.T)
    q_prev = state.x[3:7]
    _renormalize_quat(x, q_prev)
    return KfState(x=x, P=P, rejected=state.rejected)


def robot_pose_from_marker(
    marker_pose_cam: np.ndarray,
    marker_world: np.ndarray,
    base: BasePose,
    head: HeadState,
    cam: CameraConfig,
) -> BasePose:
    """Recover the base pose from a (filtered) camera-frame marker pose.

    Composes world_T_marker * (cam_T_marker)^-1 * (base_T_cam)^-1. The head
    pan/tilt fold into the kinematic chain, so camera motion does not change
    the recovered base pose. Only the current head state is taken from the
    robot; the base argument is ignored except as an API convenience and may
    be a stale estimate.
    """
    p = np.asarray(marker_pose_cam[:3], dtype=float)
    q = np.asarray(marker_pose_cam[3:7], dtype=float)
    T_cm = se3(quat_to_matrix(q), p)
    T_wc = marker_world @ se3_inv(T_cm)  # camera pose in world
    origin = BasePose(0.0, 0.0, 0.0)
    T_bc = camera_transform(origin, head, cam)  # camera in base frame
    T_wb = T_wc @ se3_inv(T_bc)
    return BasePose(float(T_wb[0, 3]), float(T_wb[1, 3]), yaw_of(T_wb))


@dataclass
class MarkerFilter:
    """KF lifecycle wrapper: init on first detection, predict at 30 Hz, gate."""

    cfg: KfConfig = field(default_factory=KfConfig)
    state: KfState | None = None
    last_measurement_time: float = -math.inf

    def step(self, z: np.ndarray | None, stamp: float) -> KfState | None:
        if self.state is None:
            if z is not None:
                self.state = kf_init(np.asarray(z), self.cfg)
                self.last_measurement_time = stamp
            return self.state
        self.state = kf_predict(self.state, self.cfg)
        if z is not None:
            before = self.state.rejected
            self.state = kf_update(self.state, z, self.cfg)
            if self.state.rejected == before:
                self.last_measurement_time = stamp
        return self.state

    def staleness(self, now: float) -> float:
        return now - self.last_measurement_time
