import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelfstock.perception import (
    CentroidTracker,
    SegmentCandidate,
    classify,
    depth_percentile,
    filter_graspable,
    fit_box,
)
from shelfstock.sim import InstanceView
from shelfstock.world import PerceptionProfile

YOLO = PerceptionProfile("product", accuracy=0.975, recall=0.930, inference_time=0.2)
GPT = PerceptionProfile("fallback", accuracy=0.847, recall=0.826, inference_time=6.9)
PERFECT = PerceptionProfile("perfect", accuracy=1.0, recall=1.0, inference_time=0.0)

GTINS = [f"{i:014d}" for i in range(1, 7)]


def _view(iid, gtin, u=640.0):
    pts = np.tile([0.0, 0.0, 1.0], (30, 1))
    return InstanceView(
        instance_id=iid,
        gtin=gtin,
        centroid_px=(u, 360.0),
        depth=1.0,
        points_cam=pts,
        visibility=1.0,
        pixel_interval=(u - 30, u + 30),
    )


def test_perfect_profile_detects_all_correctly():
    views = [_view(i, GTINS[i % 3]) for i in range(5)]
    rng = np.random.default_rng(0)
    out = classify(views, GTINS[0], PERFECT, GTINS, rng)
    assert len(out) == 5
    assert all(c.predicted_gtin == c.true_gtin for c in out)


def test_classifier_calibration_smoke():
    # law-of-large-numbers at reduced n; the acceptance suite runs 1e5
    rng = np.random.default_rng(7)
    n = 20_000
    detected = 0
    correct = 0
    for _ in range(n):
        out = classify([_view(0, GTINS[0])], GTINS[0], YOLO, GTINS, rng)
        if out:
            detected += 1
            if out[0].predicted_gtin == GTINS[0]:
                correct += 1
    assert detected / n == pytest.approx(0.930, abs=0.01)
    assert correct / detected == pytest.approx(0.975, abs=0.01)


def test_wrong_labels_drawn_from_other_gtins():
    rng = np.random.default_rng(1)
    bad = PerceptionProfile("bad", accuracy=0.0, recall=1.0, inference_time=0.0)
    out = classify([_view(0, GTINS[0]) for _ in range(200)], GTINS[0], bad, GTINS, rng)
    labels = {c.predicted_gtin for c in out}
    assert GTINS[0] not in labels
    assert labels <= set(GTINS[1:])


def test_classify_determinism():
    views = [_view(i, GTINS[i % 2]) for i in range(10)]
    a = classify(views, GTINS[0], YOLO, GTINS, np.random.default_rng(42))
    b = classify(views, GTINS[0], YOLO, GTINS, np.random.default_rng(42))
    assert [(c.instance_id, c.predicted_gtin) for c in a] == [
        (c.instance_id, c.predicted_gtin) for c in b
    ]


def _box_points(cx, cy, yaw, w, d, n_per_face=40, faces=(0,), rng=None, noise=0.0):
    pts = []
    c, s = math.cos(yaw), math.sin(yaw)
    face_defs = [
        (np.array([-s, c]), d / 2.0, np.array([c, s]), w / 2.0),  # +depth face
        (np.array([c, s]), w / 2.0, np.array([-s, c]), d / 2.0),  # +width face
    ]
    for f in faces:
        normal, half_n, tangent, half_t = face_defs[f]
        for t in np.linspace(-0.95, 0.95, n_per_face):
            p = np.array([cx, cy]) + normal * half_n + tangent * (t * half_t)
            pts.append(p)
    pts = np.array(pts)
    if rng is not None and noise > 0:
        pts = pts + rng.normal(0, noise, pts.shape)
    return pts


def test_fit_box_recovers_pose_noiseless():
    pts = _box_points(0.40, -0.25, 0.3, 0.10, 0.06, faces=(0, 1))
    s, c = math.sin(0.3), math.cos(0.3)
    toward = -(np.array([-s, c]) + np.array([c, s]))
    result = fit_box(pts, (0.10, 0.06), toward_xy=toward)
    assert result is not None
    (cx, cy), yaw, res = result
    assert math.hypot(cx - 0.40, cy + 0.25) <= 1e-3
    assert min(abs(yaw - 0.3), abs(yaw - 0.3 - math.pi), abs(yaw - 0.3 + math.pi)) <= math.radians(1.0)
    assert res <= 1e-8


def test_fit_box_cylinder_any_yaw():
    rng = np.random.default_rng(3)
    angles = rng.uniform(0, 2 * math.pi, 60)
    r = 0.033
    pts = np.stack([0.2 + r * np.cos(angles), 0.5 + r * np.sin(angles)], axis=1)
    result = fit_box(pts, (0.066, 0.066), shape="cylinder")
    assert result is not None
    (cx, cy), _, _ = result
    assert math.hypot(cx - 0.2, cy - 0.5) <= 1e-3


def test_fit_box_noise_center_within_5mm():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        cx, cy, yaw = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, math.pi)
        pts = _box_points(cx, cy, yaw, 0.10, 0.06, faces=(0,), rng=rng, noise=0.002)
        toward = np.array([math.sin(yaw), -math.cos(yaw)])
        result = fit_box(pts, (0.10, 0.06), toward_xy=toward)
        assert result is not None
        (fx, fy), _, _ = result
        worst = max(worst, math.hypot(fx - cx, fy - cy))
    assert worst <= 0.005


def test_fit_box_too_few_points():
    assert fit_box(np.zeros((4, 2)), (0.1, 0.06)) is None


def _candidate(iid, center, dims, u=640.0, vis=1.0):
    return SegmentCandidate(
        instance_id=iid,
        predicted_gtin="x",
        true_gtin="x",
        centroid_px=(u, 360.0),
        depths=np.array([1.0]),
        points_cam=np.zeros((1, 3)),
        visibility=vis,
        fitted_center=center,
        fitted_dims=dims,
        fitted_yaw=0.0,
    )


def test_filter_drops_too_wide():
    # 6.6 cm can does not fit a 2.5 cm opening; a 2 cm box face does
    can = _candidate(0, (0.0, 0.5), (0.066, 0.066))
    box = _candidate(1, (0.2, 0.5), (0.10, 0.02))
    out = filter_graspable([can, box], 0.025, np.array([0.0, 1.0]), 640.0)
    assert [c.instance_id for c in out] == [1]


def test_filter_drops_low_visibility():
    a = _candidate(0, (0.0, 0.5), (0.02, 0.02), vis=0.4)
    out = filter_graspable([a], 0.09, np.array([0.0, 1.0]), 640.0)
    assert out == []


def test_filter_drops_blocked_corridor():
    # approach along +y: an instance between the target and the robot blocks it
    far = _candidate(0, (0.0, 0.6), (0.03, 0.03))
    near = _candidate(1, (0.0, 0.3), (0.03, 0.03))
    out = filter_graspable([far, near], 0.09, np.array([0.0, 1.0]), 640.0)
    ids = [c.instance_id for c in out]
    assert 0 not in ids and 1 in ids


def test_filter_orders_by_image_center():
    a = _candidate(0, (0.0, 0.5), (0.03, 0.03), u=700.0)
    b = _candidate(1, (0.3, 0.5), (0.03, 0.03), u=650.0)
    out = filter_graspable([a, b], 0.09, np.array([0.0, 1.0]), 640.0)
    assert [c.instance_id for c in out] == [1, 0]


def test_depth_percentile_nearest_rank():
    vals = np.arange(1.0, 2.01, 0.1)  # 1.0 .. 2.0, 11 values
    assert depth_percentile(vals, 0.99) == pytest.approx(2.0)


def test_depth_percentile_constant_and_single():
    assert depth_percentile(np.full(7, 1.3)) == pytest.approx(1.3)
    assert depth_percentile(np.array([0.77])) == pytest.approx(0.77)


@settings(max_examples=100, deadline=None)
@given(
    values=st.lists(st.floats(0.1, 5.0), min_size=1, max_size=50),
    frac=st.floats(0.01, 1.0),
)
def test_depth_percentile_matches_manual_rank(values, frac):
    arr = np.array(values)
    got = depth_percentile(arr, frac)
    manual = sorted(values)[max(1, math.ceil(frac * len(values))) - 1]
    assert got == pytest.approx(manual)


def test_tracker_follows_and_reports_loss():
    tr = CentroidTracker(instance_id=3, loss_timeout=0.3)
    v = _view(3, GTINS[0])
    assert tr.update([v], 0.0) is v
    assert not tr.lost(0.2)
    assert tr.update([], 0.25) is None
    assert not tr.lost(0.25)
    assert tr.lost(0.35)
