import numpy as np
import pytest

from ceilvo import backend as be
from ceilvo import frontend as fe
from ceilvo import photometry as ph
from ceilvo import simulator as sim


def render(scene, pose, K, rays=None, noise=0.0, seed=0):
    r = sim.render_frame(scene, pose, K, noise, np.random.default_rng(seed), rays)
    return r.image


def gt_window(indices=(0, 6, 12, 18, 24), size=sim.FULL_SIZE, fps=30.0, scene=None,
              octaves=sim.SMOOTH_OCTAVES, path="square", target=400):
    """Keyframes rendered without noise at ground-truth poses, with ground-truth inverse depths."""
    scene = scene or sim.flat_scene(5.0, octaves=octaves)
    K = sim.default_intrinsics(size)
    gt = sim.generate_trajectory(sim.MotionSpec(path=path), fps)
    rays = sim.pixel_rays(K)
    cfg = fe.FrontendConfig()
    kfs = []
    for n, i in enumerate(indices):
        Twc = gt.poses[i]
        frame = ph.build_frame(render(scene, Twc, K, rays), gt.times[i], index=i)
        kf = be.Keyframe(n, frame, Twc.inverse())
        sel = fe.select_candidates(frame, target, cfg)
        uv = sel.uv()
        z = sim.depth_map(scene, Twc, K, rays)[uv[:, 1].astype(int), uv[:, 0].astype(int)]
        kf.set_points(uv, 1.0 / z)
        kfs.append(kf)
    return be.WindowState(kfs, K), gt, scene


@pytest.fixture(scope="session")
def small_window():
    """Three keyframes at 424x240, cheap enough for derivative checks."""
    w, gt, scene = gt_window((0, 8, 16), size=sim.HALF_SIZE, octaves=sim.DEFAULT_OCTAVES, target=150)
    return w


@pytest.fixture(scope="session")
def gt_window5():
    return gt_window()


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reps in terminalreporter.stats.values():
        for rep in reps:
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", ()) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
