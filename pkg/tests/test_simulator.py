import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceilvo import _kernels
from ceilvo import dataset as ds
from ceilvo import geometry as geo
from ceilvo import simulator as sim

PROPS = settings(max_examples=100, deadline=None)
K = sim.default_intrinsics(sim.HALF_SIZE)


@pytest.fixture(scope="module")
def smooth_scene():
    return sim.flat_scene(5.0, octaves=sim.SMOOTH_OCTAVES)


@pytest.fixture(scope="module")
def square():
    return sim.generate_trajectory(sim.MotionSpec(), 30.0)


def test_half_size_intrinsics_are_exact_halves():
    F, H = sim.default_intrinsics(), sim.default_intrinsics(sim.HALF_SIZE)
    assert (H.fx, H.fy, H.cx, H.cy) == (F.fx / 2, F.fy / 2, F.cx / 2, F.cy / 2)


def test_square_geometry(square):
    P = square.positions()
    # 4 sides of 4 m at 1 m/s plus 4 quarter turns at 1 rad/s
    assert square.times[-1] == pytest.approx(16 + 2 * np.pi, abs=1 / 30)
    assert np.allclose(P[:, 2], sim.CAMERA_HEIGHT)
    assert P[:, 0].max() == pytest.approx(4.0) and P[:, 1].max() == pytest.approx(4.0)
    assert np.linalg.norm(P[-1] - P[0]) < 1e-9
    assert np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)) == pytest.approx(16.0, abs=1e-6)


def test_multi_loop_closes():
    gt = sim.generate_trajectory(sim.MotionSpec(path="multi-loop"), 15.0)
    P = gt.positions()
    assert np.linalg.norm(P[-1, :2]) < 1e-6
    assert np.linalg.norm(P[-1] - P[0]) < 1e-6


def test_waypoints():
    spec = sim.MotionSpec(path="waypoints", waypoints=[(0, 0), (2, 0), (2, 1)])
    x, y, th = sim.robot_state(spec, 1e9)
    assert (x, y) == pytest.approx((2.0, 1.0)) and th == pytest.approx(np.pi / 2)


@PROPS
@given(st.floats(0, 23))
def test_poses_planar_yaw_only(t):
    spec = sim.MotionSpec()
    x, y, th = sim.robot_state(spec, t)
    T = sim.camera_pose(x, y, th)
    assert T.t[2] == sim.CAMERA_HEIGHT
    q = geo.rot_to_quat(T.R)
    assert abs(q[0]) < 1e-12 and abs(q[1]) < 1e-12
    assert np.allclose(T.R[:, 2], [0, 0, 1])


def test_motion_validation():
    with pytest.raises(sim.SimulationError):
        sim.generate_trajectory(sim.MotionSpec(linear_speed=5.0), 30)
    with pytest.raises(sim.SimulationError):
        sim.generate_trajectory(sim.MotionSpec(path="zigzag"), 30)
    with pytest.raises(sim.SimulationError):
        sim.generate_trajectory(sim.MotionSpec(), 0)


def test_camera_must_look_up(smooth_scene):
    down = geo.Pose(geo.so3_exp([np.pi, 0, 0]), [0, 0, 0.5])
    with pytest.raises(sim.SimulationError):
        sim.render_frame(smooth_scene, down, K)


def test_depth_map_flat_ceiling(smooth_scene, square):
    z = sim.depth_map(smooth_scene, square.poses[7], K)
    assert np.allclose(z, 4.5)


@PROPS
@given(st.integers(0, 400), st.integers(1, 12), st.floats(-1, 1), st.floats(-1, 1))
def test_photo_consistency(smooth_scene, square, i, di, sx, sy):
    cache = test_photo_consistency.__dict__.setdefault("cache", {})
    j = min(i + di, len(square) - 1)

    def img(k):
        if k not in cache:
            cache[k] = sim.render_frame(smooth_scene, square.poses[k], K).image
        return cache[k]

    # a ceiling point near the centre of view of frame i
    Ti = square.poses[i]
    X = Ti.apply(np.array([sx * 3.0, sy * 1.5, 4.5]))
    vals = []
    for k in (i, j):
        uv = geo.project(K, square.poses[k].inverse().apply(X))
        v, _, _, ok = _kernels.bilinear(img(k), uv[:1], uv[1:])
        if not ok[0]:
            return
        vals.append(v[0])
    assert abs(vals[0] - vals[1]) < 0.5


def test_noise_is_seeded(smooth_scene, square):
    a = sim.render_frame(smooth_scene, square.poses[0], K, 1.0, np.random.default_rng([0, 3])).image
    b = sim.render_frame(smooth_scene, square.poses[0], K, 1.0, np.random.default_rng([0, 3])).image
    c = sim.render_frame(smooth_scene, square.poses[0], K, 0.0).image
    assert np.array_equal(a, b)
    assert 0.9 < np.std(a - c) < 1.1


def test_emit_dataset_deterministic(tmp_path):
    scene = sim.flat_scene(5.0)
    spec = sim.MotionSpec(duration=0.5)
    a = sim.emit_dataset(scene, spec, 6.0, sim.HALF_SIZE, str(tmp_path / "a"), seed=4)
    b = sim.emit_dataset(scene, spec, 6.0, sim.HALF_SIZE, str(tmp_path / "b"), seed=4)
    c = sim.emit_dataset(scene, spec, 6.0, sim.HALF_SIZE, str(tmp_path / "c"), seed=5)
    assert ds.directory_digest(a) == ds.directory_digest(b) != ds.directory_digest(c)
    d = ds.open_dataset(a)
    assert len(d) == 4 and d.K == K
    assert d.image(0).shape == (240, 424) and d.exposure(0) is None
    gt = d.groundtruth()
    assert np.allclose(gt.positions[:, 2], sim.CAMERA_HEIGHT)


def test_ridge_scene_heights():
    sc = sim.ridge_scene()
    h = sc.height(np.array([2.0, -6.0, 10.0, 30.0]), np.zeros(4))
    assert h[0] == 6.0 and h[1] == pytest.approx(4.0) and h[2] == pytest.approx(4.0) and h[3] == 4.0
    z = sim.depth_map(sc, sim.camera_pose(2.0, 0.0, 0.0), K)
    assert z[K.height // 2, K.width // 2] == pytest.approx(5.5, abs=0.05)
