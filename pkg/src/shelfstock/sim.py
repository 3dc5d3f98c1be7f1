"""Deterministic fixed-step planar simulator.

The time base is a 600 Hz integer tick grid. Control runs every 30 grid ticks
(T = 0.05 s) and the marker camera every 20 grid ticks (30 Hz), so both rates
divide the grid evenly and never alias. Nothing happens between events: the
base/head/arm integrate once per control period with the latched commands,
exactly the explicit-Euler models below, and sensor events observe the latest
state.

Base: x_{k+1} = x_k + T [v cos(th), v sin(th), w],   th wrapped to (-pi, pi].
Head: integrator on pan/tilt, clamped to joint limits.
Arm:  integrator on lift/extension/wrist/aperture; downward motion into a
      support surface stops at contact and raises the contact flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import world as world_mod
from .geometry import (
    obb_corners,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_mul,
    quat_normalize,
    se3,
    se3_from_pose,
    se3_inv,
    wrap_angle,
)

GRID_HZ = 600
CONTROL_TICKS = 30  # 20 Hz, T = 0.05 s
SENSOR_TICKS = 20  # 30 Hz
CONTROL_DT = CONTROL_TICKS / GRID_HZ
SENSOR_DT = SENSOR_TICKS / GRID_HZ


@dataclass(frozen=True)
class BasePose:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class BaseInput:
    v: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class HeadState:
    pan: float = 0.0
    tilt: float = 0.0


@dataclass(frozen=True)
class HeadInput:
    v_pan: float = 0.0
    v_tilt: float = 0.0


@dataclass(frozen=True)
class ArmState:
    lift: float = 0.0  # vertical lift joint, meters
    extension: float = 0.0  # telescopic arm, meters
    wrist_yaw: float = 0.0
    aperture: float = 0.09  # gripper opening, meters


@dataclass(frozen=True)
class ArmInput:
    v_lift: float = 0.0
    v_ext: float = 0.0
    v_wrist: float = 0.0
    v_aperture: float = 0.0


@dataclass(frozen=True)
class EffortSignal:
    contact: bool = False
    effort: float = 0.0  # blocked speed, the effort proxy


@dataclass(frozen=True)
class Limits:
    v_max: float = 0.3
    omega_max: float = 1.5
    pan_range: tuple[float, float] = (-3.9, 1.6)
    tilt_range: tuple[float, float] = (-1.5, 0.8)
    head_rate_max: float = 1.0
    lift_range: tuple[float, float] = (0.0, 1.1)
    ext_range: tuple[float, float] = (0.0, 0.52)
    wrist_range: tuple[float, float] = (-1.75, 1.75)
    aperture_range: tuple[float, float] = (0.0, 0.09)
    lift_rate_max: float = 0.15
    ext_rate_max: float = 0.2
    wrist_rate_max: float = 1.0


@dataclass(frozen=True)
class CameraConfig:
    width_px: int = 1280
    height_px: int = 720
    fov_h: float = math.radians(69.0)
    fov_v: float = math.radians(42.0)
    height: float = 1.30  # optical center above the floor
    max_range: float = 3.5

    @property
    def fx(self) -> float:
        return (self.width_px / 2.0) / math.tan(self.fov_h / 2.0)

    @property
    def fy(self) -> float:
        return (self.height_px / 2.0) / math.tan(self.fov_v / 2.0)

    @property
    def cx(self) -> float:
        return self.width_px / 2.0

    @property
    def cy(self) -> float:
        return self.height_px / 2.0


@dataclass(frozen=True)
class NoiseConfig:
    # Marker position jitter per camera axis. The raw calibration value 0.5 is
    # interpreted at the 1e-2 m scale; tunable, not ground truth.
    sigma_pos: tuple[float, float, float] = (0.005, 0.005, 0.005)
    sigma_rot: float = 0.02  # axis-angle perturbation, radians


def clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def step_base(pose: BasePose, inp: BaseInput, T: float) -> BasePose:
    """One explicit-Euler unicycle step; theta re-wrapped."""
    return BasePose(
        pose.x + T * inp.v * math.cos(pose.theta),
        pose.y + T * inp.v * math.sin(pose.theta),
        wrap_angle(pose.theta + T * inp.omega),
    )


def clamp_base_input(inp: BaseInput, lim: Limits) -> BaseInput:
    return BaseInput(
        clamp(inp.v, -lim.v_max, lim.v_max),
        clamp(inp.omega, -lim.omega_max, lim.omega_max),
    )


def step_head(state: HeadState, inp: HeadInput, lim: Limits, T: float) -> HeadState:
    vp = clamp(inp.v_pan, -lim.head_rate_max, lim.head_rate_max)
    vt = clamp(inp.v_tilt, -lim.head_rate_max, lim.head_rate_max)
    return HeadState(
        clamp(state.pan + T * vp, *lim.pan_range),
        clamp(state.tilt + T * vt, *lim.tilt_range),
    )


def step_arm(
    state: ArmState,
    inp: ArmInput,
    lim: Limits,
    T: float,
    stop_z: float | None = None,
) -> tuple[ArmState, EffortSignal]:
    """Integrate the arm one step.

    stop_z is the lowest admissible lift height given the support surface under
    the gripper (plus the carried item, if any). Lowering onto it clamps the
    lift there and raises the contact flag; plain joint-limit clamping does not.
    """
    v_l = clamp(inp.v_lift, -lim.lift_rate_max, lim.lift_rate_max)
    v_e = clamp(inp.v_ext, -lim.ext_rate_max, lim.ext_rate_max)
    v_w = clamp(inp.v_wrist, -lim.wrist_rate_max, lim.wrist_rate_max)

    lift = clamp(state.lift + T * v_l, *lim.lift_range)
    contact = False
    effort = 0.0
    if stop_z is not None:
        if lift < stop_z:
            contact = True
            effort = (stop_z - lift) / T
            lift = stop_z
        elif lift == stop_z and v_l < 0.0:
            contact = True
    new = ArmState(
        lift,
        clamp(state.extension + T * v_e, *lim.ext_range),
        clamp(state.wrist_yaw + T * v_w, *lim.wrist_range),
        clamp(state.aperture + T * inp.v_aperture, *lim.aperture_range),
    )
    return new, EffortSignal(contact=contact, effort=effort)


@dataclass(frozen=True)
class RobotParams:
    limits: Limits = field(default_factory=Limits)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    arm_mount_offset: float = 0.14  # gripper offset from base center at zero extension
    grip_drop: float = 0.0  # gripper point below the lift joint height
    nav_speed: float = 0.4  # waypoint navigator travel speed, for time accounting


# optical frame (OpenCV: z forward, x right, y down) expressed in the head frame
_R_HEAD_OPTICAL = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def camera_transform(base: BasePose, head: HeadState, cam: CameraConfig) -> np.ndarray:
    """world_T_optical for the pan/tilt head camera.

    Pan rotates about the base z-axis (0 = straight ahead), positive tilt
    pitches the optical axis up.
    """
    cb, sb = math.cos(base.theta), math.sin(base.theta)
    R_base = np.array([[cb, -sb, 0.0], [sb, cb, 0.0], [0.0, 0.0, 1.0]])
    cp, sp = math.cos(head.pan), math.sin(head.pan)
    R_pan = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    ct, st = math.cos(head.tilt), math.sin(head.tilt)
    R_tilt = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
    R = R_base @ R_pan @ R_tilt @ _R_HEAD_OPTICAL
    t = np.array([base.x, base.y, cam.height])
    return se3(R, t)


def gripper_position(base: BasePose, arm: ArmState, params: RobotParams) -> np.ndarray:
    """World position of the gripper point.

    The arm telescopes out the robot's right side (negative base-y), which is
    what makes the published visual-servo gain signs literal with a
    right-panned camera.
    """
    reach = params.arm_mount_offset + arm.extension
    c, s = math.cos(base.theta), math.sin(base.theta)
    return np.array(
        [
            base.x + s * reach,
            base.y - c * reach,
            arm.lift - params.grip_drop,
        ]
    )


@dataclass(frozen=True)
class MarkerObservation:
    marker_id: int
    position: np.ndarray  # camera-frame, meters
    quaternion: np.ndarray  # camera-frame, scalar-last, unit norm
    stamp: float  # sim seconds

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.quaternion])


def _project(T_cw: np.ndarray, p_world: np.ndarray, cam: CameraConfig):
    p = T_cw[:3, :3] @ p_world + T_cw[:3, 3]
    if p[2] <= 1e-6:
        return None
    u = cam.cx + cam.fx * p[0] / p[2]
    v = cam.cy + cam.fy * p[1] / p[2]
    return u, v, p[2]


def observe_marker(
    markers: dict[int, np.ndarray],
    base: BasePose,
    head: HeadState,
    cam: CameraConfig,
    noise: NoiseConfig,
    rng: np.random.Generator | None,
    stamp: float,
    marker_id: int | None = None,
    occluded: frozenset[int] | set[int] = frozenset(),
) -> MarkerObservation | None:
    """Camera-frame pose of a visible marker, or None.

    A marker is visible when it projects inside the image, lies within range,
    faces the camera (tag +z toward the viewer) and is not flagged occluded.
    With several markers visible the one closest to the optical axis wins,
    unless a specific marker_id is requested. rng=None yields the exact
    geometric pose.
    """
    T_wc = camera_transform(base, head, cam)
    T_cw = se3_inv(T_wc)
    best = None
    best_off = float("inf")
    for mid, T_wm in markers.items():
        if mid in occluded:
            continue
        if marker_id is not None and mid != marker_id:
            continue
        T_cm = T_cw @ T_wm
        p = T_cm[:3, 3]
        if p[2] <= 0.05 or float(np.linalg.norm(p)) > cam.max_range:
            continue
        # tag z-axis must point back toward the camera
        if float((T_cm[:3, :3] @ np.array([0.0, 0.0, 1.0])) @ p) >= 0.0:
            continue
        u = cam.cx + cam.fx * p[0] / p[2]
        v = cam.cy + cam.fy * p[1] / p[2]
        if not (0.0 <= u < cam.width_px and 0.0 <= v < cam.height_px):
            continue
        off = (u - cam.cx) ** 2 + (v - cam.cy) ** 2
        if off < best_off:
            best_off = off
            best = (mid, T_cm)
    if best is None:
        return None
    mid, T_cm = best
    pos = T_cm[:3, 3].copy()
    q = quat_from_matrix(T_cm[:3, :3])
    if rng is not None:
        pos = pos + rng.normal(0.0, 1.0, 3) * np.asarray(noise.sigma_pos)
        if noise.sigma_rot > 0.0:
            axis = rng.normal(0.0, 1.0, 3)
            angle = rng.normal(0.0, noise.sigma_rot)
            q = quat_normalize(quat_mul(quat_from_axis_angle(axis, angle), q))
    return MarkerObservation(mid, pos, q, stamp)


@dataclass
class ProductInstance:
    instance_id: int
    gtin: str
    x: float
    y: float
    z: float  # bottom face height
    yaw: float
    width: float
    depth: float
    height: float
    shape: str
    location: str  # "cart", "held" or "shelf:<id>:<level>"


@dataclass(frozen=True)
class InstanceView:
    instance_id: int
    gtin: str
    centroid_px: tuple[float, float]
    depth: float  # camera distance to the body center along the optical axis
    points_cam: np.ndarray  # sampled visible-surface points, optical frame, K x 3
    visibility: float
    pixel_interval: tuple[float, float]


def _surface_points(inst: ProductInstance, cam_pos: np.ndarray) -> np.ndarray:
    """World points sampled on the camera-facing surface of the instance."""
    heights = np.array([inst.z + inst.height * f for f in (0.25, 0.5, 0.75)])
    pts = []
    if inst.shape == "cylinder":
        r = inst.width / 2.0
        to_cam = math.atan2(cam_pos[1] - inst.y, cam_pos[0] - inst.x)
        for a in np.linspace(-1.3, 1.3, 9):
            ang = to_cam + a
            for h in heights:
                pts.append([inst.x + r * math.cos(ang), inst.y + r * math.sin(ang), h])
    else:
        c, s = math.cos(inst.yaw), math.sin(inst.yaw)
        center = np.array([inst.x, inst.y])
        view = cam_pos[:2] - center
        faces = [
            (np.array([c, s]), inst.width / 2.0, np.array([-s, c]), inst.depth / 2.0),
            (np.array([-s, c]), inst.depth / 2.0, np.array([c, s]), inst.width / 2.0),
        ]
        for normal, half_n, tangent, half_t in faces:
            for sign in (1.0, -1.0):
                n = normal * sign
                if float(n @ view) <= 1e-9:
                    continue  # face looks away from the camera
                face_c = center + n * half_n
                for f in np.linspace(-0.9, 0.9, 7):
                    p2 = face_c + tangent * (f * half_t)
                    for h in heights:
                        pts.append([p2[0], p2[1], h])
    return np.array(pts)


def _interval_cover(target: tuple[float, float], others: list[tuple[float, float]]) -> float:
    lo, hi = target
    segs = []
    for olo, ohi in others:
        a, b = max(lo, olo), min(hi, ohi)
        if b > a:
            segs.append((a, b))
    segs.sort()
    covered = 0.0
    cur = lo
    for a, b in segs:
        a = max(a, cur)
        if b > a:
            covered += b - a
            cur = b
    return covered


def render_products(
    instances: list[ProductInstance],
    base: BasePose,
    head: HeadState,
    cam: CameraConfig,
    visibility_threshold: float = 0.5,
) -> list[InstanceView]:
    """Geometric sensing proxy: project visible product instances into the image.

    Occlusion is resolved in the image plane: a nearer instance masks the part
    of a farther instance's horizontal pixel interval that it covers. Instances
    below the visibility threshold are dropped. Output is ordered by distance
    of the centroid from the image center.
    """
    T_wc = camera_transform(base, head, cam)
    T_cw = se3_inv(T_wc)
    cam_pos = T_wc[:3, 3]

    raw = []
    for inst in instances:
        zc = inst.z + inst.height / 2.0
        proj = _project(T_cw, np.array([inst.x, inst.y, zc]), cam)
        if proj is None:
            continue
        u, v, depth = proj
        if depth > cam.max_range:
            continue
        if inst.shape == "cylinder":
            r = inst.width / 2.0
            corners = [
                (inst.x + r * math.cos(a), inst.y + r * math.sin(a))
                for a in np.linspace(0, 2 * math.pi, 8, endpoint=False)
            ]
        else:
            corners = [tuple(p) for p in obb_corners(inst.x, inst.y, inst.width, inst.depth, inst.yaw)]
        us = []
        for cx, cy in corners:
            pr = _project(T_cw, np.array([cx, cy, zc]), cam)
            if pr is not None:
                us.append(pr[0])
        if not us:
            continue
        lo, hi = min(us), max(us)
        if hi < 0.0 or lo > cam.width_px:
            continue
        raw.append((inst, u, v, depth, lo, hi))

    views: list[InstanceView] = []
    for inst, u, v, depth, lo, hi in raw:
        clip_lo, clip_hi = max(lo, 0.0), min(hi, float(cam.width_px))
        span = hi - lo
        if span <= 0.0:
            continue
        covered = _interval_cover(
            (clip_lo, clip_hi),
            [(olo, ohi) for other, _, _, od, olo, ohi in raw if other is not inst and od < depth],
        )
        visible = max(0.0, (clip_hi - clip_lo) - covered) / span
        if visible < visibility_threshold:
            continue
        pts_world = _surface_points(inst, cam_pos)
        pts_cam = (T_cw[:3, :3] @ pts_world.T).T + T_cw[:3, 3]
        pts_cam = pts_cam[pts_cam[:, 2] > 0.0]
        views.append(
            InstanceView(
                instance_id=inst.instance_id,
                gtin=inst.gtin,
                centroid_px=(u, v),
                depth=depth,
                points_cam=pts_cam,
                visibility=visible,
                pixel_interval=(lo, hi),
            )
        )
    views.sort(key=lambda w: (abs(w.centroid_px[0] - cam.cx), w.instance_id))
    return views


class Simulation:
    """Owns the mutable run state: clock, robot, items, markers, battery.

    Sensor hooks registered by controllers fire at every 30 Hz sensor event
    that falls inside an advanced control period.
    """

    def __init__(
        self,
        scenario: world_mod.Scenario,
        params: RobotParams | None = None,
        seed: int | None = None,
    ):
        self.scenario = scenario
        self.params = params or RobotParams()
        self.seed = scenario.seed if seed is None else seed
        self._streams: dict[str, np.random.Generator] = {}
        self.tick = 0
        self.base = BasePose(*scenario.robot_start)
        self.head = HeadState()
        self.arm = ArmState()
        self.battery = 100.0
        self.battery_drain = 0.002  # percent per sim second while undocked
        self.battery_charge = 0.05
        self.docked = False
        self.marker_transforms = {
            mid: se3_from_pose(m.position, m.quaternion) for mid, m in scenario.markers.items()
        }
        self.occluded_markers: set[int] = set()
        self.instances: list[ProductInstance] = []
        self.held_instance: int | None = None
        self._next_instance = 0
        self.sensor_hooks: list = []
        self.trace: list[tuple] | None = None
        for item in scenario.cart.items:
            self.spawn_cart_item(item.gtin, item.x, item.y, item.yaw)

    # -- rng streams -----------------------------------------------------
    def stream(self, key: str) -> np.random.Generator:
        """Purpose-keyed generator; stream identity depends only on (seed, key)."""
        g = self._streams.get(key)
        if g is None:
            ent = [self.seed] + [ord(c) for c in key]
            g = np.random.Generator(np.random.PCG64(np.random.SeedSequence(ent)))
            self._streams[key] = g
        return g

    # -- time ------------------------------------------------------------
    @property
    def time(self) -> float:
        return self.tick / GRID_HZ

    def advance_control_period(
        self,
        base_in: BaseInput = BaseInput(),
        head_in: HeadInput = HeadInput(),
        arm_in: ArmInput = ArmInput(),
        stop_z: float | None = None,
    ) -> EffortSignal:
        """Latch commands, integrate one T = 0.05 s step, fire sensor events."""
        t0 = self.tick
        base_in = clamp_base_input(base_in, self.params.limits)
        self.base = step_base(self.base, base_in, CONTROL_DT)
        self.head = step_head(self.head, head_in, self.params.limits, CONTROL_DT)
        self.arm, effort = step_arm(self.arm, arm_in, self.params.limits, CONTROL_DT, stop_z)
        if self.held_instance is not None:
            self._carry_held()
        if self.docked:
            self.battery = min(100.0, self.battery + self.battery_charge * CONTROL_DT)
        else:
            self.battery = max(0.0, self.battery - self.battery_drain * CONTROL_DT)
        self.tick = t0 + CONTROL_TICKS
        if self.trace is not None:
            self.trace.append(
                (
                    self.time,
                    self.base.x,
                    self.base.y,
                    self.base.theta,
                    self.head.pan,
                    self.head.tilt,
                    self.arm.lift,
                    self.arm.extension,
                )
            )
        # sensor events in (t0, t0 + CONTROL_TICKS] observe the stepped state
        t = (t0 // SENSOR_TICKS + 1) * SENSOR_TICKS
        while t <= self.tick:
            stamp = t / GRID_HZ
            for hook in list(self.sensor_hooks):
                hook(stamp)
            t += SENSOR_TICKS
        return effort

    def advance_idle(self, seconds: float) -> None:
        """Consume sim time with zero commands (waits, inference delays)."""
        n = max(1, round(seconds / CONTROL_DT))
        for _ in range(n):
            self.advance_control_period()

    def teleport(self, pose: tuple[float, float, float], settle: float = 0.5) -> None:
        """Waypoint navigator stand-in: hop to the pose, charging travel time."""
        dist = math.hypot(pose[0] - self.base.x, pose[1] - self.base.y)
        self.advance_idle(dist / self.params.nav_speed + settle)
        self.base = BasePose(pose[0], pose[1], wrap_angle(pose[2]))

    # -- sensing ---------------------------------------------------------
    def observe(self, marker_id: int | None = None, noisy: bool = True) -> MarkerObservation | None:
        rng = self.stream("sensor") if noisy else None
        return observe_marker(
            self.marker_transforms,
            self.base,
            self.head,
            self.params.camera,
            self.params.noise,
            rng,
            self.time,
            marker_id=marker_id,
            occluded=self.occluded_markers,
        )

    def render(self) -> list[InstanceView]:
        visible = [i for i in self.instances if i.instance_id != self.held_instance]
        return render_products(visible, self.base, self.head, self.params.camera)

    # -- items -----------------------------------------------------------
    def spawn_cart_item(self, gtin: str, cx: float, cy: float, yaw: float = 0.0) -> int:
        cart = self.scenario.cart
        prod = self.scenario.products[gtin]
        c, s = math.cos(cart.pose[2]), math.sin(cart.pose[2])
        iid = self._next_instance
        self._next_instance += 1
        self.instances.append(
            ProductInstance(
                instance_id=iid,
                gtin=gtin,
                x=cart.pose[0] + c * cx - s * cy,
                y=cart.pose[1] + s * cx + c * cy,
                z=cart.height,
                yaw=wrap_angle(cart.pose[2] + yaw),
                width=prod.width,
                depth=prod.depth,
                height=prod.height,
                shape=prod.shape,
                location="cart",
            )
        )
        return iid

    def clear_cart(self) -> None:
        self.instances = [
            i for i in self.instances if i.location != "cart" or i.instance_id == self.held_instance
        ]

    def clear_shelf_level(self, shelf_id: str, level: int) -> None:
        key = f"shelf:{shelf_id}:{level}"
        self.instances = [i for i in self.instances if i.location != key]

    def instance(self, iid: int) -> ProductInstance:
        for i in self.instances:
            if i.instance_id == iid:
                return i
        raise LookupError(f"no instance {iid}")

    def grasp(self, capture_radius: float = 0.05) -> int | None:
        """Close on the nearest instance within reach of the gripper point."""
        g = gripper_position(self.base, self.arm, self.params)
        best, best_d = None, capture_radius
        for inst in self.instances:
            if inst.location == "held":
                continue
            zc = inst.z + inst.height / 2.0
            d = math.sqrt((inst.x - g[0]) ** 2 + (inst.y - g[1]) ** 2 + (zc - g[2]) ** 2)
            if d < best_d:
                grip_dim = inst.width if inst.shape == "cylinder" else min(inst.width, inst.depth)
                if grip_dim <= self.params.limits.aperture_range[1]:
                    best, best_d = inst, d
        if best is None:
            return None
        self.held_instance = best.instance_id
        best.location = "held"
        self._carry_held()
        return best.instance_id

    def _carry_held(self) -> None:
        inst = self.instance(self.held_instance)
        g = gripper_position(self.base, self.arm, self.params)
        inst.x, inst.y = float(g[0]), float(g[1])
        inst.z = float(g[2]) - inst.height / 2.0
        inst.yaw = wrap_angle(self.base.theta - math.pi / 2.0 + self.arm.wrist_yaw)

    def release(self, location: str) -> int | None:
        if self.held_instance is None:
            return None
        iid = self.held_instance
        self.instance(iid).location = location
        self.held_instance = None
        return iid


def held_stop_z(sim: Simulation, surface_z: float) -> float:
    """Lift height at which the carried item (or bare gripper) meets a surface."""
    if sim.held_instance is not None:
        inst = sim.instance(sim.held_instance)
        return surface_z + inst.height / 2.0 + sim.params.grip_drop
    return surface_z + sim.params.grip_drop
