"""Statistical stand-in for the learned perception stack.

Detection and labeling are seeded Bernoulli draws calibrated to the measured
classifier table (per-segment detection probability = recall, label
correctness = accuracy, wrong labels drawn uniformly from the scenario's
other products). Inference cost is charged to the simulation clock, not wall
time, so experiments run fast while reproducing the timing effects.

Geometry replaces learned masks everywhere else: bounding boxes are fitted to
sampled surface points using the known product dimensions, graspability is a
geometric filter, and tracking is re-projection of the chosen instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import InstanceView
from .world import PerceptionProfile


@dataclass
class SegmentCandidate:
    instance_id: int
    predicted_gtin: str | None
    true_gtin: str
    centroid_px: tuple[float, float]
    depths: np.ndarray
    points_cam: np.ndarray
    visibility: float
    fitted_center: tuple[float, float] | None = None
    fitted_yaw: float | None = None
    fitted_dims: tuple[float, float] | None = None
    fit_residual: float | None = None
    graspable: bool = False


def classify(
    views: list[InstanceView],
    target_gtin: str,
    profile: PerceptionProfile,
    all_gtins: list[str],
    rng: np.random.Generator,
) -> list[SegmentCandidate]:
    """Run the stochastic detector over the rendered instance views.

    Every visible instance is detected independently with probability the
    profile's recall; a detected instance keeps its true label with
    probability the profile's accuracy, otherwise it is assigned a wrong
    label drawn uniformly from the other products in the scenario.
    """
    wrong_pool = [g for g in all_gtins if len(all_gtins) > 1]
    out = []
    for view in views:
        if rng.random() >= profile.recall:
            continue  # the detector missed this segment entirely
        if rng.random() < profile.accuracy:
            label = view.gtin
        else:
            others = [g for g in wrong_pool if g != view.gtin]
            label = others[int(rng.integers(len(others)))] if others else view.gtin
        out.append(
            SegmentCandidate(
                instance_id=view.instance_id,
                predicted_gtin=label,
                true_gtin=view.gtin,
                centroid_px=view.centroid_px,
                depths=view.points_cam[:, 2].copy() if view.points_cam.size else np.empty(0),
                points_cam=view.points_cam,
                visibility=view.visibility,
            )
        )
    _ = target_gtin  # selection happens downstream; kept for the call signature
    return out


def depth_percentile(depths: np.ndarray, fraction: float = 0.99) -> float:
    """Nearest-rank percentile of a depth sample set."""
    depths = np.asarray(depths, dtype=float)
    if depths.size == 0:
        raise ValueError("empty depth sample set")
    ordered = np.sort(depths)
    rank = max(1, math.ceil(fraction * ordered.size))
    return float(ordered[rank - 1])


def _box_surface_distance(pts: np.ndarray, cx: float, cy: float, yaw: float, w: float, d: float) -> float:
    """Mean squared distance from points to the rectangle perimeter."""
    c, s = math.cos(yaw), math.sin(yaw)
    dx = pts[:, 0] - cx
    dy = pts[:, 1] - cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ax = np.abs(lx) - w / 2.0
    ay = np.abs(ly) - d / 2.0
    outside = np.hypot(np.maximum(ax, 0.0), np.maximum(ay, 0.0))
    inside = np.minimum(np.maximum(ax, ay), 0.0)  # negative: depth inside
    dist = np.where((ax > 0) | (ay > 0), outside, -inside)
    return float(np.mean(dist**2))


def fit_box(
    points_xy: np.ndarray,
    dims: tuple[float, float],
    shape: str = "box",
    toward_xy: np.ndarray | None = None,
    min_points: int = 10,
) -> tuple[tuple[float, float], float, float] | None:
    """Fit (center, yaw) of a known-size footprint to planar surface points.

    Boxes: coarse 1-degree yaw grid over [0, pi) with a parabolic refinement.
    For each yaw the center is initialized by support projection: along an
    axis whose projected span matches the full extent the center is the span
    midpoint; along an axis where only one face was sampled the center sits
    half an extent behind the face, on the side the camera cannot see
    (toward_xy, the camera-to-object direction, resolves that sign). A small
    coordinate descent then polishes the center. Cylinders are
    rotation-invariant, so only the circle center is estimated. Returns None
    when too few samples survive.
    """
    pts = np.asarray(points_xy, dtype=float)
    if pts.shape[0] < min_points:
        return None
    w, d = dims
    if toward_xy is None:
        toward = None
    else:
        toward = np.asarray(toward_xy, dtype=float)
        n = np.linalg.norm(toward)
        toward = toward / n if n > 0 else None

    if shape == "cylinder":
        r = w / 2.0
        center = pts.mean(axis=0)
        if toward is not None:
            center = center + toward * r * 0.5
        for _ in range(25):
            vec = pts - center
            dist = np.linalg.norm(vec, axis=1)
            dist[dist < 1e-12] = 1e-12
            proj = pts - vec * (r / dist)[:, None]
            new_center = proj.mean(axis=0)
            if np.linalg.norm(new_center - center) < 1e-10:
                center = new_center
                break
            center = new_center
        res = float(np.mean((np.linalg.norm(pts - center, axis=1) - r) ** 2))
        return (float(center[0]), float(center[1])), 0.0, res

    def center_init(yaw: float) -> np.ndarray:
        c, s = math.cos(yaw), math.sin(yaw)
        axes = (np.array([c, s]), np.array([-s, c]))
        extents = (w, d)
        coords = []
        for axis, extent in zip(axes, extents):
            proj = pts @ axis
            lo, hi = float(proj.min()), float(proj.max())
            if hi - lo >= 0.7 * extent:
                # full extent visible: candidates are the span midpoint and,
                # when the sample covers one face uniformly, the plain mean
                coords.append((0.5 * (lo + hi), float(proj.mean())))
            else:
                # one face sampled: push half an extent away from the camera
                face = float(proj.mean())
                if toward is not None:
                    sign = 1.0 if float(toward @ axis) > 0 else -1.0
                else:
                    sign = 1.0
                coords.append((face + sign * extent / 2.0,))
        best = (np.inf, None)
        for ca in coords[0]:
            for cb in coords[1]:
                cand = ca * axes[0] + cb * axes[1]
                r_ = _box_surface_distance(pts, cand[0], cand[1], yaw, w, d)
                if r_ < best[0]:
                    best = (r_, cand)
        return best[1]

    def polish(yaw: float, center: np.ndarray) -> tuple[float, np.ndarray]:
        r_best = _box_surface_distance(pts, center[0], center[1], yaw, w, d)
        c_best = center
        for step in (0.004, 0.001, 0.0005):
            improved = True
            while improved:
                improved = False
                for dxy in ((step, 0), (-step, 0), (0, step), (0, -step)):
                    cand = c_best + np.array(dxy)
                    r_ = _box_surface_distance(pts, cand[0], cand[1], yaw, w, d)
                    if r_ < r_best - 1e-15:
                        r_best, c_best = r_, cand
                        improved = True
        return r_best, c_best

    grid = np.deg2rad(np.arange(0.0, 180.0, 1.0))
    residuals = np.empty(grid.size)
    for i, yaw in enumerate(grid):
        ci = center_init(yaw)
        residuals[i] = _box_surface_distance(pts, ci[0], ci[1], yaw, w, d)
    i0 = int(np.argmin(residuals))
    im, ip = (i0 - 1) % grid.size, (i0 + 1) % grid.size
    ym, y0, yp = residuals[im], residuals[i0], residuals[ip]
    denom = ym - 2 * y0 + yp
    offset = 0.5 * (ym - yp) / denom if abs(denom) > 1e-18 else 0.0
    offset = float(np.clip(offset, -1.0, 1.0))
    best = (np.inf, None, None)
    for yaw in (grid[i0], grid[i0] + offset * math.radians(1.0)):
        r_, c_ = polish(yaw, center_init(yaw))
        if r_ < best[0]:
            best = (r_, c_, yaw)
    r_fin, c_fin, yaw_fin = best
    return (float(c_fin[0]), float(c_fin[1])), float(yaw_fin % math.pi), float(r_fin)


def filter_graspable(
    candidates: list[SegmentCandidate],
    max_opening: float,
    approach_dir_xy: np.ndarray,
    image_center_u: float,
    corridor_width: float = 0.06,
    visibility_threshold: float = 0.5,
) -> list[SegmentCandidate]:
    """Geometric graspability filter, ordered by distance to image center.

    Drops candidates that are mostly hidden, too wide for the gripper, or
    whose straight-line approach corridor crosses another candidate's fitted
    footprint.
    """
    kept = []
    for cand in candidates:
        if cand.visibility < visibility_threshold:
            continue
        if cand.fitted_dims is None or cand.fitted_center is None:
            continue
        grip_dim = min(cand.fitted_dims)
        if grip_dim > max_opening:
            continue
        kept.append(cand)

    approach = np.asarray(approach_dir_xy, dtype=float)
    approach = approach / max(np.linalg.norm(approach), 1e-12)
    normal = np.array([-approach[1], approach[0]])

    def corridor_blocked(cand: SegmentCandidate) -> bool:
        c0 = np.asarray(cand.fitted_center)
        for other in kept:
            if other is cand:
                continue
            oc = np.asarray(other.fitted_center)
            rel = oc - c0
            along = float(rel @ -approach)  # toward the robot
            if along <= 0.0:
                continue
            lateral = abs(float(rel @ normal))
            other_half = max(other.fitted_dims) / 2.0
            if lateral < corridor_width / 2.0 + other_half:
                return True
        return False

    unblocked = [c for c in kept if not corridor_blocked(c)]
    for c in unblocked:
        c.graspable = True
    unblocked.sort(key=lambda c: (abs(c.centroid_px[0] - image_center_u), c.instance_id))
    return unblocked


class CentroidTracker:
    """Geometric tracker: re-projects one chosen instance frame to frame and
    reports loss after a visibility gap."""

    def __init__(self, instance_id: int, loss_timeout: float = 0.3):
        self.instance_id = instance_id
        self.loss_timeout = loss_timeout
        self.last_seen: float | None = None
        self.last_view: InstanceView | None = None

    def update(self, views: list[InstanceView], now: float) -> InstanceView | None:
        for view in views:
            if view.instance_id == self.instance_id:
                self.last_seen = now
                self.last_view = view
                return view
        return None

    def lost(self, now: float) -> bool:
        if self.last_seen is None:
            return False
        return (now - self.last_seen) > self.loss_timeout
