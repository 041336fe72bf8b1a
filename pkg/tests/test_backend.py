import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceilvo import backend as be
from ceilvo import geometry as geo
from ceilvo import photometry as ph
from ceilvo.photometry import AffineBrightness

PROPS = settings(max_examples=100, deadline=None)
seeds = st.integers(0, 2 ** 31 - 1)


# ---- robust norm and weights

@PROPS
@given(st.floats(-1e3, 1e3), st.floats(0.1, 50))
def test_huber_properties(r, gamma):
    h = be.huber_norm(r, gamma)
    assert h >= 0 and be.huber_norm(-r, gamma) == h
    assert h <= 0.5 * r * r + 1e-12
    w = float(be.huber_weight(r, gamma))
    assert 0 < w <= 1
    # IRLS weight times the residual is the derivative of the penalty
    eps = 1e-6 * max(1.0, abs(r))
    if abs(abs(r) - gamma) > 2 * eps:
        d = (be.huber_norm(r + eps, gamma) - be.huber_norm(r - eps, gamma)) / (2 * eps)
        assert d == pytest.approx(w * r, rel=1e-6, abs=1e-6)


def test_huber_is_continuous_at_threshold():
    g = 9.0
    assert be.huber_norm(g - 1e-12, g) == pytest.approx(be.huber_norm(g + 1e-12, g), abs=1e-9)
    assert be.huber_norm(g, g) == pytest.approx(40.5)
    assert be.huber_norm(19.0, g) == pytest.approx(9 * (19 - 4.5))


@PROPS
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1, 200))
def test_gradient_weight_range(gx, gy, c):
    w = be.gradient_weight(np.array([gx, gy]), c)
    assert 0 < w <= 1
    assert be.gradient_weight(np.zeros(2), c) == 1.0
    assert be.gradient_weight(np.array([c, 0.0]), c) == pytest.approx(0.5)


# ---- Jacobians against central differences

def _perturbed(window, rng, scale=1.0):
    w = copy.copy(window)
    w.keyframes = [copy.copy(k) for k in window.keyframes]
    for k in w.keyframes[1:]:
        k.pose = geo.exp(rng.normal(0, 1, 6) * np.r_[[3e-3] * 3, [2e-3] * 3] * scale) @ k.pose
    for k in w.keyframes:
        k.affine = AffineBrightness(rng.normal(0, 0.05) * scale, rng.normal(0, 2) * scale)
    return w


def _off_grid(u, v, margin=1e-3):
    fu, fv = u - np.floor(u), v - np.floor(v)
    return (np.minimum(fu, 1 - fu) > margin) & (np.minimum(fv, 1 - fv) > margin)


def _project_targets(host, target, K, uv, d, pattern):
    q = uv[:, None, :] + pattern[None]
    X = geo.back_project_many(K, q, np.broadcast_to(d[:, None], q.shape[:2]))
    p, _ = geo.project_many(K, (target.pose @ host.pose.inverse()).apply(X))
    return p


def _check_configuration(window, rng, h=1e-6):
    kfs = window.keyframes
    hi, ti = rng.choice(len(kfs), 2, replace=False)
    host, target = kfs[hi], kfs[ti]
    K = window.K
    sel = rng.choice(host.n_points, 12, replace=False)
    uv = host.uv[sel] + rng.uniform(-0.4, 0.4, (12, 2))
    d = host.idepth[sel] * rng.uniform(0.95, 1.05, 12)
    P = be.PATTERN

    def res(host=host, target=target, K=K, d=d):
        return be.pair_terms(host, target, K, P, uv=uv, idepth=d).r

    base = be.pair_terms(host, target, K, P, jacobians=True, uv=uv, idepth=d)
    p = _project_targets(host, target, K, uv, d, P)
    keep = base.mask & _off_grid(p[..., 0], p[..., 1])
    errs = {}

    def compare(name, Ja, Jn):
        Ja, Jn = Ja[keep], Jn[keep]
        denom = max(np.abs(Jn).max(), np.abs(Ja).max(), 1e-6)
        errs[name] = max(errs.get(name, 0.0), float(np.abs(Ja - Jn).max() / denom))

    for which, kf in (("host", host), ("target", target)):
        Ja = base.J_host if which == "host" else base.J_target
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            plus, minus = copy.copy(kf), copy.copy(kf)
            plus.pose = geo.exp(e) @ kf.pose
            minus.pose = geo.exp(-e) @ kf.pose
            kw = lambda x: {which: x}
            Jn = (res(**kw(plus)) - res(**kw(minus))) / (2 * h)
            compare(f"{which}-pose", Ja[..., i], Jn)
        for i, attr in ((6, "a"), (7, "b")):
            plus, minus = copy.copy(kf), copy.copy(kf)
            ab = kf.affine
            plus.affine = AffineBrightness(ab.a + h * (attr == "a"), ab.b + h * (attr == "b"))
            minus.affine = AffineBrightness(ab.a - h * (attr == "a"), ab.b - h * (attr == "b"))
            kw = lambda x: {which: x}
            Jn = (res(**kw(plus)) - res(**kw(minus))) / (2 * h)
            compare(f"{which}-affine", Ja[..., i], Jn)
    Jn = np.zeros_like(base.r)
    for k in range(len(d)):
        dp, dm = d.copy(), d.copy()
        dp[k] += h
        dm[k] -= h
        Jn[k] = (res(d=dp)[k] - res(d=dm)[k]) / (2 * h)
    compare("depth", base.J_depth, Jn)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h * 100  # intrinsics are O(100), scale the step accordingly
        Jn = (res(K=K.with_vector(K.vector() + e)) - res(K=K.with_vector(K.vector() - e))) / (2 * e[i])
        compare("intrinsics", base.J_K[..., i], Jn)
    return errs


def jacobian_errors(window, n, seed=0):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(n):
        w = _perturbed(window, rng)
        for k, v in _check_configuration(w, rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst


def test_jacobians_match_finite_differences(small_window):
    worst = jacobian_errors(small_window, 60, seed=11)
    assert set(worst) == {"host-pose", "target-pose", "host-affine", "target-affine", "depth", "intrinsics"}
    assert max(worst.values()) < 1e-4, worst


# ---- normal equations

@PROPS
@given(seeds)
def test_hessian_symmetric_psd(small_window, seed):
    w = _perturbed(small_window, np.random.default_rng(seed), scale=2.0)
    H = be.build_system(w).H
    assert np.allclose(H, H.T, atol=1e-9 * np.abs(H).max())
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    assert ev.min() > -1e-9 * ev.max()


def test_hessian_with_intrinsics_layout(small_window):
    w = copy.copy(small_window)
    w.optimize_intrinsics = True
    sysm = be.build_system(w)
    assert sysm.H.shape == (w.dim, w.dim)
    assert len(sysm.b) == w.dim


@PROPS
@given(seeds)
def test_gradient_vanishes_at_zero_residual(small_window, seed):
    rng = np.random.default_rng(seed)
    src = small_window.keyframes[0]
    # power-of-two focal length and inverse depths make the back-projection
    # round trip exact, so every residual is exactly zero
    K = geo.Intrinsics(256.0, 256.0, 212.0, 120.0, 424, 240)
    kfs = []
    for i in range(3):
        k = be.Keyframe(i, src.frame, geo.Pose())
        k.set_points(src.uv[:40], 2.0 ** rng.integers(-2, 2, 40))
        kfs.append(k)
    sysm = be.build_system(be.WindowState(kfs, K))
    assert sysm.energy == 0.0
    assert np.abs(sysm.b).max() < 1e-8


@PROPS
@given(seeds)
def test_energy_trace_non_increasing(small_window, seed):
    w = _perturbed(small_window, np.random.default_rng(seed))
    for k in w.keyframes:
        k.idepth = k.idepth.copy()
    res = be.optimize_window(w, 3)
    assert np.all(np.diff(res.energies) <= 0)
    assert res.energies[-1] == pytest.approx(be.total_energy(w), rel=1e-12)


@PROPS
@given(seeds)
def test_gauge_invariance(small_window, seed):
    rng = np.random.default_rng(seed)
    w = _perturbed(small_window, rng)
    E = be.total_energy(w)
    G = geo.exp(rng.normal(0, 2, 6))
    moved = copy.copy(w)
    moved.keyframes = [copy.copy(k) for k in w.keyframes]
    for k in moved.keyframes:
        # camera-from-world poses: a world change multiplies on the right
        k.pose = k.pose @ G
    assert abs(be.total_energy(moved) - E) <= 1e-9 * max(E, 1.0)


@PROPS
@given(seeds, st.floats(-40, 40))
def test_brightness_gauge(small_window, seed, c):
    w = _perturbed(small_window, np.random.default_rng(seed))
    shifted = copy.copy(w)
    shifted.keyframes = []
    for k in w.keyframes:
        f = ph.build_frame(k.frame.image + c, k.frame.timestamp, k.frame.exposure)
        nk = be.Keyframe(k.id, f, k.pose, AffineBrightness(k.affine.a, k.affine.b + c))
        nk.set_points(k.uv, k.idepth)
        shifted.keyframes.append(nk)
    for h, t in be._pairs(w):
        a = be.pair_terms(w.keyframes[h], w.keyframes[t], w.K)
        b = be.pair_terms(shifted.keyframes[h], shifted.keyframes[t], w.K)
        assert np.array_equal(a.mask, b.mask)
        assert np.allclose(a.r, b.r, atol=1e-9)


def test_depth_prior_pulls_toward_activation(small_window):
    w = _perturbed(small_window, np.random.default_rng(0))
    for k in w.keyframes:
        k.set_points(k.uv, k.idepth * 1.02, prior=k.idepth)
    w.depth_prior = 0.0
    assert be.prior_energy(w) == 0.0
    w.depth_prior = 10.0
    expect = 0.5 * 10.0 * sum(np.sum((0.02 * k.idepth / 1.02) ** 2) for k in w.keyframes)
    assert be.prior_energy(w) == pytest.approx(expect)
    sysm = be.build_system(w)
    assert sysm.energy == pytest.approx(be.total_energy(w) + be.prior_energy(w))


def test_residual_single_point(small_window):
    h, t = small_window.keyframes[:2]
    r, m = be.residual((h.uv[0, 0], h.uv[0, 1], h.idepth[0]), h, t, small_window.K)
    full = be.pair_terms(h, t, small_window.K, uv=h.uv[:1], idepth=h.idepth[:1])
    assert np.array_equal(r, full.r[0]) and np.array_equal(m, full.mask[0])


def test_optimize_needs_two_keyframes(small_window):
    w = be.WindowState(small_window.keyframes[:1], small_window.K)
    with pytest.raises(be.InsufficientObservations):
        be.optimize_window(w)


# ---- marginalisation

def test_marginalize_drops_oldest(small_window):
    w = copy.copy(small_window)
    w.keyframes = list(small_window.keyframes)
    ids = [k.id for k in w.keyframes]
    removed = be.marginalize(w, 2)
    assert [k.id for k in removed] == ids[:1]
    assert [k.id for k in w.keyframes] == ids[1:]


def test_marginalize_prefers_keyframe_out_of_view(small_window):
    w = copy.copy(small_window)
    kfs = [copy.copy(k) for k in small_window.keyframes]
    # push the middle keyframe far away so none of its points reach the newest
    kfs[1].pose = geo.Pose(t=[50.0, 0.0, 0.0]) @ kfs[1].pose
    w.keyframes = kfs
    assert be.select_marginalization(w) == 1
