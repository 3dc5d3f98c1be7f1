import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelfstock.estimation import (
    POSE_DIM,
    STATE_DIM,
    KfConfig,
    MarkerFilter,
    kf_init,
    kf_predict,
    kf_update,
    robot_pose_from_marker,
)
from shelfstock.geometry import quat_normalize, se3_from_pose
from shelfstock.sim import BasePose, CameraConfig, HeadState

IDENTITY_Q = np.array([0.0, 0.0, 0.0, 1.0])


def _z(pos, q=IDENTITY_Q):
    return np.concatenate([np.asarray(pos, dtype=float), q])


def test_init_copies_pose_zero_velocity():
    cfg = KfConfig()
    st0 = kf_init(_z([1.0, 0.0, 0.5]), cfg)
    np.testing.assert_allclose(st0.x[:7], [1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(st0.x[7:], 0.0)
    assert np.trace(st0.P) == pytest.approx(np.trace(cfg.P0))


def test_init_rejects_nonunit_quaternion():
    cfg = KfConfig()
    z = _z([0, 0, 0], np.array([0.0, 0.0, 0.0, 0.9]))
    with pytest.raises(ValueError):
        kf_init(z, cfg)


def test_predict_shifts_position_by_velocity():
    cfg = KfConfig(dt=1.0 / 30.0)
    st0 = kf_init(_z([0.0, 0.0, 0.0]), cfg)
    st0.x[7:10] = [0.3, 0.0, 0.0]
    st1 = kf_predict(st0, cfg)
    np.testing.assert_allclose(st1.x[:3], [0.01, 0.0, 0.0], atol=1e-15)


def test_predict_zero_velocity_keeps_position():
    cfg = KfConfig()
    st0 = kf_init(_z([0.4, -0.1, 0.9]), cfg)
    st1 = kf_predict(st0, cfg)
    np.testing.assert_allclose(st1.x[:7], st0.x[:7])


def test_predict_zero_noise_keeps_zero_covariance():
    cfg = KfConfig(Q=np.zeros((STATE_DIM, STATE_DIM)), P0=np.zeros((STATE_DIM, STATE_DIM)))
    st0 = kf_init(_z([0, 0, 0]), cfg)
    st1 = kf_predict(st0, cfg)
    assert np.all(st1.P == 0.0)


def test_update_scalar_analogue_gain_half():
    # 1-D slice: prior variance 1, measurement variance 1, innovation 1
    cfg = KfConfig(
        Q=np.zeros((STATE_DIM, STATE_DIM)),
        R=np.eye(POSE_DIM),
        P0=np.eye(STATE_DIM),
        gate=None,
    )
    st0 = kf_init(_z([0.0, 0.0, 0.0]), cfg)
    z = _z([1.0, 0.0, 0.0])
    st1 = kf_update(st0, z, cfg)
    assert st1.x[0] == pytest.approx(0.5)
    assert st1.P[0, 0] == pytest.approx(0.5)


def test_update_huge_prior_tracks_measurement():
    cfg = KfConfig(P0=1e6 * np.eye(STATE_DIM), R=1e-6 * np.eye(POSE_DIM), gate=None)
    st0 = kf_init(_z([0.0, 0.0, 0.0]), cfg)
    st0 = kf_predict(st0, cfg)
    z = _z([0.3, -0.2, 0.7])
    st1 = kf_update(st0, z, cfg)
    np.testing.assert_allclose(st1.x[:3], z[:3], atol=1e-3)


def test_update_zero_innovation_keeps_state():
    cfg = KfConfig(gate=None)
    st0 = kf_init(_z([0.2, 0.1, 0.4]), cfg)
    st1 = kf_update(st0, st0.x[:7].copy(), cfg)
    np.testing.assert_allclose(st1.x, st0.x, atol=1e-12)
    assert np.trace(st1.P) < np.trace(st0.P)


def test_limit_q_zero_r_huge_state_constant():
    cfg = KfConfig(Q=np.zeros((STATE_DIM, STATE_DIM)), R=1e12 * np.eye(POSE_DIM), gate=None)
    st = kf_init(_z([0.5, 0.5, 0.5]), cfg)
    rng = np.random.default_rng(3)
    for _ in range(50):
        st = kf_predict(st, cfg)
        st = kf_update(st, _z(rng.normal(0, 1, 3)), cfg)
    np.testing.assert_allclose(st.x[:3], [0.5, 0.5, 0.5], atol=1e-6)


def test_limit_r_zero_tracks_measurement_exactly():
    cfg = KfConfig(R=1e-15 * np.eye(POSE_DIM), gate=None)
    st = kf_init(_z([0.0, 0.0, 0.0]), cfg)
    st = kf_predict(st, cfg)
    z = _z([0.123, -0.456, 0.789])
    st = kf_update(st, z, cfg)
    np.testing.assert_allclose(st.x[:3], z[:3], atol=1e-9)


def test_quaternion_unit_norm_over_many_updates():
    cfg = KfConfig()
    rng = np.random.default_rng(11)
    st = kf_init(_z([1.0, 0.0, 0.0]), cfg)
    for _ in range(2000):
        st = kf_predict(st, cfg)
        q = quat_normalize(rng.normal(0, 1, 4))
        z = np.concatenate([rng.normal(0, 0.01, 3), q])
        st = kf_update(st, z, cfg)
        assert abs(np.linalg.norm(st.x[3:7]) - 1.0) <= 1e-9


def test_covariance_stays_symmetric_psd():
    cfg = KfConfig()
    rng = np.random.default_rng(5)
    st = kf_init(_z([0, 0, 1.0]), cfg)
    for _ in range(500):
        st = kf_predict(st, cfg)
        z = _z(rng.normal(0, 0.01, 3) + [0, 0, 1.0])
        st = kf_update(st, z, cfg)
        assert np.max(np.abs(st.P - st.P.T)) <= 1e-9
        assert np.min(np.linalg.eigvalsh(st.P)) >= -1e-9


def test_static_marker_rmse_reduction():
    cfg = KfConfig()
    rng = np.random.default_rng(0)
    true_pos = np.array([0.3, -0.2, 1.1])
    st = kf_init(_z(true_pos), cfg)
    raw, filt = [], []
    for k in range(300):  # 10 s at 30 Hz
        dq = rng.normal(0, 0.01, 3)
        q = quat_normalize([dq[0], dq[1], dq[2], 1.0])
        z = np.concatenate([true_pos + rng.normal(0, 0.005, 3), q])
        st = kf_predict(st, cfg)
        st = kf_update(st, z, cfg)
        if k >= 60:
            raw.append(z[:3] - true_pos)
            filt.append(st.x[:3] - true_pos)
    raw_rmse = float(np.sqrt(np.mean(np.sum(np.square(raw), axis=1))))
    filt_rmse = float(np.sqrt(np.mean(np.sum(np.square(filt), axis=1))))
    assert filt_rmse <= 0.5 * raw_rmse


def test_gate_rejects_single_outlier_then_recovers():
    cfg = KfConfig()
    st = kf_init(_z([0.0, 0.0, 1.0]), cfg)
    for _ in range(30):
        st = kf_predict(st, cfg)
        st = kf_update(st, _z([0.0, 0.0, 1.0]), cfg)
    st = kf_predict(st, cfg)
    st_out = kf_update(st, _z([5.0, 5.0, 5.0]), cfg)
    assert st_out.rejected == 1
    np.testing.assert_allclose(st_out.x, st.x)  # outlier did not move the state


def test_gate_escape_after_consecutive_rejections():
    cfg = KfConfig(max_consecutive_rejections=3)
    st = kf_init(_z([0.0, 0.0, 1.0]), cfg)
    for _ in range(30):
        st = kf_predict(st, cfg)
        st = kf_update(st, _z([0.0, 0.0, 1.0]), cfg)
    # a genuine jump keeps arriving; the 4th consecutive sample must be accepted
    target = _z([0.5, 0.0, 1.0])
    for i in range(4):
        st = kf_predict(st, cfg)
        st = kf_update(st, target, cfg)
    assert st.x[0] > 0.1


def test_marker_filter_lifecycle():
    mf = MarkerFilter()
    assert mf.step(None, 0.0) is None
    st = mf.step(_z([1.0, 0.0, 0.0]), 1.0)
    assert st is not None
    assert mf.staleness(1.2) == pytest.approx(0.2)
    mf.step(None, 1.0 + 1 / 30)
    assert mf.staleness(1.2) == pytest.approx(0.2)


def test_robot_pose_marker_one_meter_ahead():
    # Camera at the base origin looking +x (pan = tilt = 0), marker 1 m ahead
    # at camera height facing back along -x. Worked by hand:
    #   optical frame: marker position (0, 0, 1)
    #   marker axes in optical coords: x -> (1,0,0), y -> (0,-1,0), z -> (0,0,-1),
    #   i.e. a rotation of pi about the optical x-axis, q = (1, 0, 0, 0).
    # Expected base position: marker_world - [1, 0].
    from shelfstock.geometry import quat_from_matrix

    cam = CameraConfig()
    R_wm = np.column_stack([[0, -1, 0], [0, 0, 1], [-1, 0, 0]])
    T_wm = se3_from_pose([2.0, 0.5, cam.height], quat_from_matrix(R_wm))
    obs = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    pose = robot_pose_from_marker(obs, T_wm, BasePose(0, 0, 0), HeadState(), cam)
    assert pose.x == pytest.approx(1.0, abs=1e-9)
    assert pose.y == pytest.approx(0.5, abs=1e-9)
    assert pose.theta == pytest.approx(0.0, abs=1e-9)


def test_robot_pose_invariant_under_pan(tiny_scenario):
    from shelfstock.sim import Simulation

    sim = Simulation(tiny_scenario)
    sim.base = BasePose(0.5, 0.8, 0.0)
    poses = []
    for pan in (1.2, 1.4, 1.57):
        sim.head = HeadState(pan=pan, tilt=-0.2)
        obs = sim.observe(marker_id=1, noisy=False)
        assert obs is not None
        p = robot_pose_from_marker(
            obs.as_vector(), sim.marker_transforms[1], sim.base, sim.head, sim.params.camera
        )
        poses.append((p.x, p.y, p.theta))
    for p in poses[1:]:
        np.testing.assert_allclose(p, poses[0], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    px=st.floats(-0.5, 0.5),
    py=st.floats(-0.5, 0.5),
    pz=st.floats(0.5, 2.0),
)
def test_update_determinism(px, py, pz):
    cfg = KfConfig(gate=None)
    st0 = kf_init(_z([px, py, pz]), cfg)
    z = _z([px + 0.01, py - 0.01, pz])
    a = kf_update(kf_predict(st0, cfg), z, cfg)
    b = kf_update(kf_predict(st0, cfg), z, cfg)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.P, b.P)
