import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ceilvo import backend as be
from ceilvo import frontend as fe
from ceilvo import geometry as geo
from ceilvo import photometry as ph
from ceilvo import simulator as sim
from conftest import gt_window

PROPS = settings(max_examples=100, deadline=None)
seeds = st.integers(0, 2 ** 31 - 1)


@pytest.fixture(scope="session")
def pair():
    """Keyframe 0 with true depths and the frame 0.1 m further along the path, half size."""
    w, gt, scene = gt_window((0, 3), size=sim.HALF_SIZE, octaves=sim.DEFAULT_OCTAVES, target=300)
    ref, new = w.keyframes
    T_true = new.pose @ ref.pose.inverse()
    return ref, new.frame, T_true, w.K


# ---- candidates

@PROPS
@given(arrays(np.uint8, (48, 64)), st.integers(1, 40))
def test_selection_deterministic_and_off_border(img, target):
    f = ph.correct_frame(img)
    cfg = fe.FrontendConfig()
    a = fe.select_candidates(f, target, cfg)
    b = fe.select_candidates(f, target, cfg)
    assert a.uv().tolist() == b.uv().tolist()
    assert len(a) <= target
    r = cfg.pattern_radius
    uv = a.uv()
    if len(uv):
        assert uv[:, 0].min() >= r and uv[:, 0].max() <= 63 - r
        assert uv[:, 1].min() >= r and uv[:, 1].max() <= 47 - r
        blocks = {(int(u) // cfg.block_size, int(v) // cfg.block_size) for u, v in uv}
        assert len(blocks) == len(uv)


def test_flat_image_is_textureless():
    sel = fe.select_candidates(ph.correct_frame(np.full((64, 64), 90, dtype=np.uint8)), 50)
    assert len(sel) == 0 and sel.textureless
    with pytest.raises(ValueError):
        fe.select_candidates(ph.correct_frame(np.zeros((8, 8), dtype=np.uint8)), 0)


def test_selection_threshold():
    img = np.zeros((32, 32))
    img[:, 16:] = 20.0  # step edge: gradient 10 on columns 15 and 16
    f = ph.build_frame(img)
    cfg = fe.FrontendConfig(grad_floor=7.0)
    # the edge touches all four 16 px blocks, whose median gradient is 0
    sel = fe.select_candidates(f, 100, cfg)
    assert len(sel) == 4 and set(sel.uv()[:, 0]) == {15.0, 16.0}
    cfg = fe.FrontendConfig(grad_floor=11.0)
    assert len(fe.select_candidates(f, 100, cfg)) == 0


# ---- tracking

def test_self_tracking_is_identity(pair):
    ref, _, _, K = pair
    res = fe.track_frame(ref.frame, ref, geo.Pose(), K)
    assert res.converged
    assert np.abs(geo.log(res.pose)).max() < 1e-6
    assert abs(res.affine.a) < 1e-6 and abs(res.affine.b) < 1e-6


def test_tracking_recovers_motion(pair):
    ref, new, T_true, K = pair
    res = fe.track_frame(new, ref, geo.Pose(), K)
    assert res.converged and res.inlier_fraction > 0.8
    err = geo.log(res.pose @ T_true.inverse())
    assert np.linalg.norm(err[:3]) < 1e-3 and np.linalg.norm(err[3:]) < np.radians(0.05)
    assert len(res.level_residuals) == 3
    # 0.1 m sideways at 4.5 m with fx = 215
    assert res.flow == pytest.approx(215.0 * 0.1 / 4.5, rel=0.02)


@PROPS
@given(seeds)
def test_tracking_energy_non_increasing(pair, seed):
    ref, new, T_true, K = pair
    rng = np.random.default_rng(seed)
    prior = geo.exp(rng.normal(0, 1, 6) * np.r_[[0.02] * 3, [0.01] * 3]) @ T_true
    res = fe.track_frame(new, ref, prior, K)
    assert len(res.energy_trace) == 3
    for level in res.energy_trace:
        assert np.all(np.diff(level) <= 1e-9 * max(abs(level[0]), 1.0))


def test_tracking_reports_failure_on_blank_image(pair):
    ref, _, _, K = pair
    blank = ph.build_frame(np.full(ref.frame.shape, 80.0))
    res = fe.track_frame(blank, ref, geo.Pose(), K)
    assert not res.converged


def test_tracking_needs_points(pair):
    ref, new, _, K = pair
    empty = be.Keyframe(9, ref.frame, geo.Pose())
    with pytest.raises(fe.NoPoints):
        fe.track_frame(new, empty, geo.Pose(), K)


def test_hypotheses_cover_large_motion():
    w, gt, _ = gt_window((0, 1), size=sim.FULL_SIZE, octaves=sim.DEFAULT_OCTAVES, fps=3.0, target=300)
    ref, new = w.keyframes
    T_true = new.pose @ ref.pose.inverse()
    direct = fe.track_frame(new.frame, ref, geo.Pose(), w.K)
    guesses = fe.rank_hypotheses(new.frame, ref, [geo.Pose()], w.K)
    best = min(np.linalg.norm(geo.log(g @ T_true.inverse())[:3]) for g in guesses)
    res = fe.track_frame(new.frame, ref, guesses[0], w.K)
    # 0.33 m at 4.5 m depth is ~32 px, beyond plain coarse-to-fine tracking
    assert np.linalg.norm(geo.log(direct.pose @ T_true.inverse())[:3]) > 0.1
    assert best < 0.1
    assert np.linalg.norm(geo.log(res.pose @ T_true.inverse())[:3]) < 2e-3


# ---- depth search

def test_epipolar_search_finds_depth(pair):
    ref, new, T_true, K = pair
    cfg = fe.FrontendConfig()
    sel = fe.select_candidates(ref.frame, 300, cfg)
    truth = dict(zip(map(tuple, ref.uv.astype(int)), ref.idepth))
    errs, n_tent = [], 0
    for c in sel.points[::5]:
        out = fe.initialize_depth(c, ref.frame, new, T_true, K, cfg)
        if out.status == "dropped":
            continue
        if out.tentative:
            n_tent += 1
            continue
        d = truth[(c.u, c.v)]
        errs.append(abs(out.idepth - d) / d)
        assert out.d_min <= out.idepth <= out.d_max
    assert len(errs) > 0.6 * len(sel.points[::5])
    assert np.median(errs) < 0.02


def test_epipolar_search_zero_baseline(pair):
    ref, new, _, K = pair
    c = fe.select_candidates(ref.frame, 10).points[0]
    with pytest.raises(fe.DepthUnobservable):
        fe.initialize_depth(c, ref.frame, new, geo.Pose(geo.so3_exp([0, 0, 0.1])), K)


def test_epipolar_search_drops_invisible(pair):
    ref, new, _, K = pair
    c = fe.select_candidates(ref.frame, 10).points[0]
    far = geo.Pose(t=[100.0, 0.0, 0.0])
    assert fe.initialize_depth(c, ref.frame, new, far, K).status == "dropped"


# ---- keyframe policy

def _result(flow=0.0, da=0.0, res=1.0):
    return fe.TrackingResult(geo.Pose(), ph.AffineBrightness(), [res], 1.0, True, flow, da, res)


def test_keyframe_criteria():
    cfg = fe.FrontendConfig()
    diag = float(np.hypot(848, 480))
    assert not fe.should_create_keyframe(_result(flow=0.019 * diag), cfg, diag)
    assert fe.should_create_keyframe(_result(flow=0.021 * diag), cfg, diag)
    assert fe.should_create_keyframe(_result(da=-0.21), cfg, diag)
    assert not fe.should_create_keyframe(_result(res=1.9), cfg, diag, residual_median=1.0)
    assert fe.should_create_keyframe(_result(res=2.1), cfg, diag, residual_median=1.0)


def test_keyframe_policy_history():
    pol = fe.KeyframePolicy(fe.FrontendConfig(), 1000.0)
    for _ in range(5):
        assert not pol(_result(res=1.0))
    assert pol(_result(res=3.0))
    pol.reset_history()
    assert not pol(_result(res=3.0))
