"""Autonomous docking: navigate to staging, rotate 180 degrees, visually servo
backward onto the charger, re-stage on marker loss.

Frame convention (this is what makes the published gains' signs literal): the
dock frame's +x axis points along the approach direction, from the staging
point toward the dock, with the origin at the docked base position. The robot
backs in, so its heading in this frame is ~pi and the servo output
v = K_x * (x_curr - x_des) is negative (reverse drive) while the robot is
short of the dock. K_y < 0 then steers the lateral error down while reversing.

The control law consumes raw per-frame marker detections (no filter); the
success detector alone smooths the measured errors with a short exponential
average so sensor jitter cannot flap the docked decision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .estimation import robot_pose_from_marker
from .geometry import wrap_angle
from .sim import BaseInput, BasePose, CameraConfig, HeadInput, HeadState, Simulation, clamp

CONTROL_DT = 0.05


class DockingPhase(Enum):
    NAVIGATE_TO_STAGING = "navigate_to_staging"
    ROTATE_180 = "rotate_180"
    SERVO = "servo"
    DOCKED = "docked"
    FAILED = "failed"


# legal transitions; Servo -> NavigateToStaging is the marker-loss fallback
TRANSITIONS = {
    DockingPhase.NAVIGATE_TO_STAGING: {DockingPhase.ROTATE_180, DockingPhase.DOCKED},
    DockingPhase.ROTATE_180: {DockingPhase.SERVO},
    DockingPhase.SERVO: {
        DockingPhase.DOCKED,
        DockingPhase.NAVIGATE_TO_STAGING,
        DockingPhase.FAILED,
    },
}


@dataclass(frozen=True)
class DockingConfig:
    k_x: float = 0.75
    k_y: float = -5.0
    v_max: float = 0.25
    omega_max: float = 2.5
    pos_tolerance: float = 0.02
    heading_tolerance: float = math.radians(3.0)
    dwell: float = 0.5  # seconds the errors must hold inside tolerance
    loss_timeout: float = 0.5
    max_restage: int = 3
    error_smoothing: float = 0.35  # EMA factor for the success detector


@dataclass
class DockResult:
    success: bool
    final_pos_error: float
    final_heading_error: float
    phases: list[DockingPhase]
    duration: float
    restages: int
    cause: str = ""


def servo_step(
    curr: tuple[float, float],
    des: tuple[float, float],
    cfg: DockingConfig,
) -> BaseInput:
    """The proportional docking law with symmetric velocity clamps."""
    v = clamp(cfg.k_x * (curr[0] - des[0]), -cfg.v_max, cfg.v_max)
    omega = clamp(cfg.k_y * (curr[1] - des[1]), -cfg.omega_max, cfg.omega_max)
    return BaseInput(v, omega)


@dataclass
class DockFrame:
    """Planar frame with +x from staging toward the dock, origin at the dock."""

    origin: tuple[float, float]
    yaw: float  # world yaw of the +x axis

    @classmethod
    def from_poses(cls, dock_pose, staging_pose) -> "DockFrame":
        dx = dock_pose[0] - staging_pose[0]
        dy = dock_pose[1] - staging_pose[1]
        return cls(origin=(dock_pose[0], dock_pose[1]), yaw=math.atan2(dy, dx))

    def to_frame(self, pose: BasePose) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pose.x - self.origin[0]
        dy = pose.y - self.origin[1]
        return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(pose.theta - self.yaw)])

    def point_to_frame(self, xy) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = xy[0] - self.origin[0]
        dy = xy[1] - self.origin[1]
        return np.array([c * dx + s * dy, -s * dx + c * dy])


def dock_transform(
    observation_vec: np.ndarray,
    marker_world: np.ndarray,
    head: HeadState,
    cam: CameraConfig,
    frame: DockFrame,
) -> tuple[tuple[float, float], tuple[float, float], float]:
    """Dock-frame coordinates of the robot and of the docked target.

    Returns ((x_curr, y_curr), (x_des, y_des), heading_error); the target is
    the frame origin by construction, so des is always (0, 0).

    The position is computed from the observed marker *position* carried into
    the base frame through the known camera chain, assuming the nominal
    backing heading. A residual heading error then shows up in y_curr with a
    range-proportional lever arm, which is exactly what damps the lateral
    servo loop; resolving the full pose in the world frame first would cancel
    that coupling and leave the y/omega loop marginally stable. The heading
    error returned for the success detector does use the observed orientation.
    """
    from .sim import camera_transform

    p_cam = np.asarray(observation_vec[:3], dtype=float)
    T_bc = camera_transform(BasePose(0.0, 0.0, 0.0), head, cam)
    b = T_bc[:3, :3] @ p_cam + T_bc[:3, 3]  # marker in the base frame
    m = frame.point_to_frame(marker_world[:2, 3])
    # nominal heading is pi, so base-frame offsets map to the frame negated twice
    x_curr = float(m[0] + b[0])
    y_curr = float(m[1] + b[1])
    base = robot_pose_from_marker(observation_vec, marker_world, BasePose(0, 0, 0), head, cam)
    heading_err = wrap_angle(base.theta - (frame.yaw + math.pi))
    return (x_curr, y_curr), (0.0, 0.0), heading_err


def _head_tracking_input(sim: Simulation, marker_world: np.ndarray, gain: float = 4.0) -> HeadInput:
    """Rate-limited proportional head pointing at the marker's true bearing.

    Pan unwraps toward the nearer representation inside the joint range so the
    backward look uses -pi rather than +pi.
    """
    lim = sim.params.limits
    mx, my, mz = marker_world[:3, 3]
    dx, dy = mx - sim.base.x, my - sim.base.y
    bearing = wrap_angle(math.atan2(dy, dx) - sim.base.theta)
    lo, hi = lim.pan_range
    candidates = [bearing, bearing - 2 * math.pi, bearing + 2 * math.pi]
    reachable = [c for c in candidates if lo <= c <= hi]
    pan_target = min(reachable, key=lambda c: abs(c - sim.head.pan)) if reachable else bearing
    dist = math.hypot(dx, dy)
    tilt_target = math.atan2(mz - sim.params.camera.height, max(dist, 1e-6))
    return HeadInput(
        clamp(gain * (pan_target - sim.head.pan), -lim.head_rate_max, lim.head_rate_max),
        clamp(gain * (tilt_target - sim.head.tilt), -lim.head_rate_max, lim.head_rate_max),
    )


def run_docking(sim: Simulation, cfg: DockingConfig | None = None, max_seconds: float = 120.0) -> DockResult:
    """Execute the full docking sequence against the simulator."""
    cfg = cfg or DockingConfig()
    dock = sim.scenario.dock
    marker_world = sim.marker_transforms[dock.marker_id]
    frame = DockFrame.from_poses(dock.pose, dock.staging_pose)
    phases = [DockingPhase.NAVIGATE_TO_STAGING]
    t_start = sim.time
    restages = 0
    cause = ""

    def true_errors():
        p = frame.to_frame(sim.base)
        return math.hypot(p[0], p[1]), abs(wrap_angle(p[2] - math.pi))

    pos_err, head_err = true_errors()
    if pos_err <= cfg.pos_tolerance and head_err <= cfg.heading_tolerance:
        sim.docked = True
        phases.append(DockingPhase.DOCKED)
        return DockResult(True, pos_err, head_err, phases, 0.0, 0, "already docked")

    latest_obs: list = [None]

    def on_sensor(stamp: float) -> None:
        obs = sim.observe(marker_id=dock.marker_id)
        if obs is not None:
            latest_obs[0] = obs

    sim.sensor_hooks.append(on_sensor)
    try:
        while phases[-1] not in (DockingPhase.DOCKED, DockingPhase.FAILED):
            if sim.time - t_start > max_seconds:
                phases.append(DockingPhase.FAILED)
                cause = "timeout"
                break
            phase = phases[-1]
            if phase == DockingPhase.NAVIGATE_TO_STAGING:
                sim.docked = False
                sim.teleport(dock.staging_pose)
                phases.append(DockingPhase.ROTATE_180)
            elif phase == DockingPhase.ROTATE_180:
                target_heading = wrap_angle(dock.staging_pose[2] + math.pi)
                err = wrap_angle(target_heading - sim.base.theta)
                while abs(err) > 0.01:
                    omega = clamp(4.0 * err, -cfg.omega_max, cfg.omega_max)
                    sim.advance_control_period(
                        BaseInput(0.0, omega), _head_tracking_input(sim, marker_world)
                    )
                    err = wrap_angle(target_heading - sim.base.theta)
                latest_obs[0] = None
                phases.append(DockingPhase.SERVO)
            elif phase == DockingPhase.SERVO:
                servo_entry = sim.time
                ema = None
                dwell_ticks = 0
                while True:
                    if sim.time - t_start > max_seconds:
                        phases.append(DockingPhase.FAILED)
                        cause = "timeout"
                        break
                    obs = latest_obs[0]
                    stale = obs is None or (sim.time - obs.stamp) > cfg.loss_timeout
                    if stale and (sim.time - servo_entry) > cfg.loss_timeout:
                        if restages >= cfg.max_restage:
                            phases.append(DockingPhase.FAILED)
                            cause = "marker lost"
                        else:
                            restages += 1
                            phases.append(DockingPhase.NAVIGATE_TO_STAGING)
                        break
                    if obs is None:
                        sim.advance_control_period(head_in=_head_tracking_input(sim, marker_world))
                        continue
                    curr, des, heading_err = dock_transform(
                        obs.as_vector(), marker_world, sim.head, sim.params.camera, frame
                    )
                    err_vec = np.array([curr[0] - des[0], curr[1] - des[1], heading_err])
                    ema = err_vec if ema is None else (
                        cfg.error_smoothing * err_vec + (1 - cfg.error_smoothing) * ema
                    )
                    within = (
                        math.hypot(ema[0], ema[1]) <= cfg.pos_tolerance
                        and abs(ema[2]) <= cfg.heading_tolerance
                    )
                    dwell_ticks = dwell_ticks + 1 if within else 0
                    if dwell_ticks * CONTROL_DT >= cfg.dwell:
                        sim.docked = True
                        phases.append(DockingPhase.DOCKED)
                        break
                    cmd = servo_step(curr, des, cfg)
                    sim.advance_control_period(cmd, _head_tracking_input(sim, marker_world))
    finally:
        sim.sensor_hooks.remove(on_sensor)

    pos_err, head_err = true_errors()
    success = phases[-1] == DockingPhase.DOCKED
    cause = "docked" if success else (cause or "failed")
    return DockResult(success, pos_err, head_err, phases, sim.time - t_start, restages, cause)


def phases_are_legal(phases: list[DockingPhase]) -> bool:
    for a, b in zip(phases, phases[1:]):
        if b not in TRANSITIONS.get(a, set()):
            return False
    return True
