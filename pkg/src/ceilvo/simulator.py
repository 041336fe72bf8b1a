"""Synthetic ceiling scenes seen by an upward-facing camera on a planar robot."""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import ndimage

from . import _kernels
from .geometry import Intrinsics, Pose, yaw_rotation

log = logging.getLogger(__name__)

MAX_LINEAR_SPEED = 1.4
CAMERA_HEIGHT = 0.5
FULL_SIZE = (848, 480)
HALF_SIZE = (424, 240)


class SimulationError(ValueError):
    pass


def default_intrinsics(size=FULL_SIZE):
    """Wide-angle pinhole model; the half-size variant halves fx, fy, cx, cy exactly."""
    w, h = size
    s = w / FULL_SIZE[0]
    return Intrinsics(430.0 * s, 430.0 * s, 424.0 * s, 240.0 * s, w, h)


# ---------------------------------------------------------------- textures

def value_noise(shape, cell, rng):
    """Smooth random field: a coarse random grid upsampled with cubic splines."""
    h, w = shape
    gh = int(np.ceil(h / cell)) + 4
    gw = int(np.ceil(w / cell)) + 4
    grid = rng.standard_normal((gh, gw))
    yy = np.arange(h) / cell + 1.5
    xx = np.arange(w) / cell + 1.5
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(grid, [Y, X], order=3, mode="nearest")


@dataclass
class Texture:
    """Bitmap draped over world ``(x, y)``: texel ``(i, j)`` sits at ``origin + (j, i) / resolution``."""

    bitmap: np.ndarray
    origin: tuple
    resolution: float

    def lookup(self, x, y):
        u = (np.asarray(x) - self.origin[0]) * self.resolution
        v = (np.asarray(y) - self.origin[1]) * self.resolution
        val, _, _, ok = _kernels.bilinear(self.bitmap, u, v)
        return val, ok


# default texture: enough gradient for tracking; SMOOTH_OCTAVES keeps
# interpolation error under 0.5 intensity units for photo-consistency checks
DEFAULT_OCTAVES = ((0.5, 25.0), (0.5, 12.0))
SMOOTH_OCTAVES = ((0.6, 40.0), (0.3, 18.0))


def procedural_texture(extent, resolution=100.0, seed=0, octaves=DEFAULT_OCTAVES,
                       lamps=6, lamp_radius=0.25, mean=110.0, contrast=50.0):
    """Band-limited value-noise octaves plus soft bright discs emulating lamps.

    ``octaves`` are ``(amplitude, cell size in cm)``; ``extent`` is
    ``(xmin, ymin, xmax, ymax)`` in metres.
    """
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = extent
    w = int(np.ceil((x1 - x0) * resolution)) + 1
    h = int(np.ceil((y1 - y0) * resolution)) + 1
    tex = np.zeros((h, w))
    for amp, cell_cm in octaves:
        tex += amp * value_noise((h, w), cell_cm / 100.0 * resolution, rng)
    tex = mean + contrast * tex / max(np.std(tex), 1e-9)
    if lamps:
        cx = rng.uniform(x0, x1, lamps)
        cy = rng.uniform(y0, y1, lamps)
        ys = y0 + np.arange(h) / resolution
        xs = x0 + np.arange(w) / resolution
        for lx, ly in zip(cx, cy):
            gx = np.exp(-0.5 * ((xs - lx) / lamp_radius) ** 2)
            gy = np.exp(-0.5 * ((ys - ly) / lamp_radius) ** 2)
            tex += 90.0 * np.outer(gy, gx)
    # smooth saturation keeps the texture differentiable where a hard clip would kink
    lo, hi = 5.0, 250.0
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return Texture(mid + half * np.tanh((tex - mid) / half), (x0, y0), resolution)


# ----------------------------------------------------------------- scenes

@dataclass
class Plane:
    """``normal . X = offset`` in world coordinates."""

    normal: np.ndarray
    offset: float


@dataclass
class CeilingScene:
    planes: list
    texture: Texture
    h_min: float
    h_max: float
    kind: str = "flat"
    ridge_x: float = 0.0

    def height(self, x, y):
        if self.kind == "flat":
            return np.full(np.broadcast(x, y).shape, self.h_min)
        slope = (self.h_max - self.h_min) / self._half_width
        return np.clip(self.h_max - slope * np.abs(np.asarray(x) - self.ridge_x), self.h_min, self.h_max)

    _half_width: float = 1.0

    def intersect(self, origin, dirs):
        """First hit of rays ``origin + t * dirs`` on the ceiling; returns ``(points, hit_mask)``."""
        dirs = np.asarray(dirs, dtype=np.float64)
        best = np.full(dirs.shape[:-1], np.inf)
        for pl in self.planes:
            nd = dirs @ pl.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (pl.offset - origin @ pl.normal) / nd
            P = origin + t[..., None] * dirs
            on = (nd != 0) & (t > 0) & (np.abs(self.height(P[..., 0], P[..., 1]) - P[..., 2]) < 1e-6)
            best = np.where(on & (t < best), t, best)
        hit = np.isfinite(best)
        P = origin + np.where(hit, best, 0.0)[..., None] * dirs
        return P, hit


def flat_scene(height=5.0, extent=(-8.0, -8.0, 12.0, 12.0), seed=0, **tex_kw):
    tex = procedural_texture(extent, seed=seed, **tex_kw)
    return CeilingScene([Plane(np.array([0.0, 0.0, 1.0]), height)], tex, height, height, "flat")


def ridge_scene(h_min=4.0, h_max=6.0, ridge_x=2.0, half_width=8.0, extent=(-8.0, -8.0, 12.0, 12.0),
                seed=0, **tex_kw):
    """Two inclined planes meeting at a ridge along ``x = ridge_x``, clipped to ``[h_min, h_max]``."""
    tex = procedural_texture(extent, seed=seed, **tex_kw)
    slope = (h_max - h_min) / half_width
    planes = [
        Plane(np.array([slope, 0.0, 1.0]), h_max + slope * ridge_x),
        Plane(np.array([-slope, 0.0, 1.0]), h_max - slope * ridge_x),
        Plane(np.array([0.0, 0.0, 1.0]), h_min),
    ]
    sc = CeilingScene(planes, tex, h_min, h_max, "ridge", ridge_x)
    sc._half_width = half_width
    return sc


# ------------------------------------------------------------ trajectories

@dataclass
class MotionSpec:
    """Planar differential-drive motion.

    ``path`` is ``"square"``, ``"multi-loop"`` or ``"waypoints"``; ``side`` sets
    the square edge (m), ``loop_radius`` the multi-loop circles.  ``duration``
    truncates the path when given.
    """

    path: str = "square"
    linear_speed: float = 1.0
    angular_speed: float = 1.0
    duration: float = None
    side: float = 4.0
    loop_radius: float = 1.0
    n_loops: int = 3
    waypoints: list = field(default_factory=list)

    def validate(self):
        if self.linear_speed > MAX_LINEAR_SPEED:
            raise SimulationError(f"linear speed {self.linear_speed} m/s exceeds {MAX_LINEAR_SPEED} m/s")
        if self.linear_speed <= 0 or self.angular_speed <= 0:
            raise SimulationError("speeds must be positive")
        if self.duration is not None and self.duration < 0:
            raise SimulationError("duration must be non-negative")


def _segments(spec):
    """Unicycle segments ``(duration, v, omega)``."""
    v, w = spec.linear_speed, spec.angular_speed
    segs = []
    if spec.path == "square":
        for _ in range(4):
            segs.append((spec.side / v, v, 0.0))
            segs.append((0.5 * np.pi / w, 0.0, w))
    elif spec.path == "multi-loop":
        r = spec.loop_radius
        gap = 1.5 * r
        for k in range(spec.n_loops):
            segs.append((2.0 * np.pi * r / v, v, v / r))
            if k < spec.n_loops - 1:
                segs.append((gap / v, v, 0.0))
        segs.append((np.pi / w, 0.0, w))
        segs.append(((spec.n_loops - 1) * gap / v, v, 0.0))
        segs.append((np.pi / w, 0.0, w))
    elif spec.path == "waypoints":
        pts = [np.asarray(p, dtype=np.float64) for p in spec.waypoints]
        heading = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            d = b - a
            dist = float(np.hypot(*d))
            if dist == 0:
                continue
            target = float(np.arctan2(d[1], d[0]))
            turn = (target - heading + np.pi) % (2 * np.pi) - np.pi
            if abs(turn) > 1e-12:
                segs.append((abs(turn) / w, 0.0, np.sign(turn) * w))
            segs.append((dist / v, v, 0.0))
            heading = target
    else:
        raise SimulationError(f"unknown path kind {spec.path!r}")
    return segs


def _advance(state, dt, v, w):
    x, y, th = state
    if w == 0.0:
        return (x + v * dt * np.cos(th), y + v * dt * np.sin(th), th)
    th2 = th + w * dt
    if v == 0.0:
        return (x, y, th2)
    return (x + v / w * (np.sin(th2) - np.sin(th)), y - v / w * (np.cos(th2) - np.cos(th)), th2)


def path_duration(spec):
    total = sum(s[0] for s in _segments(spec))
    return total if spec.duration is None else min(total, spec.duration)


def robot_state(spec, t, segs=None):
    """Exact ``(x, y, heading)`` at time ``t`` by closed-form integration over segments."""
    segs = _segments(spec) if segs is None else segs
    state = (0.0, 0.0, 0.0)
    for dur, v, w in segs:
        if t <= dur:
            return _advance(state, t, v, w)
        state = _advance(state, dur, v, w)
        t -= dur
    return state


@dataclass
class GroundTruth:
    """World-frame camera poses (camera-to-world) at sample times."""

    times: np.ndarray
    poses: list

    def __len__(self):
        return len(self.times)

    def positions(self):
        return np.array([p.t for p in self.poses])


def camera_pose(x, y, heading, height=CAMERA_HEIGHT):
    """Camera-to-world pose: optical axis +z, image x axis along the robot heading."""
    return Pose(yaw_rotation(heading), np.array([x, y, height]))


def generate_trajectory(spec, rate, height=CAMERA_HEIGHT):
    """Sample the planar path at ``rate`` Hz."""
    spec.validate()
    if not rate > 0:
        raise SimulationError("rate must be positive")
    T = path_duration(spec)
    n = int(np.floor(T * rate + 1e-9)) + 1
    times = np.arange(n) / rate
    segs = _segments(spec)
    poses = [camera_pose(*robot_state(spec, t, segs), height=height) for t in times]
    return GroundTruth(times, poses)


# --------------------------------------------------------------- rendering

@dataclass
class RenderResult:
    image: np.ndarray
    miss_fraction: float


def pixel_rays(K):
    u, v = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def render_frame(scene, camera_pose, K, noise_sigma=0.0, rng=None, rays=None):
    """Ray-cast every pixel centre to the ceiling and look up the texture.

    ``camera_pose`` maps camera to world.  Pixels whose ray misses are 0.
    """
    axis = camera_pose.R[:, 2]
    if axis[2] < np.cos(np.radians(45.0)):
        raise SimulationError("camera must look upward (optical axis within 45 deg of +z)")
    rays = pixel_rays(K) if rays is None else rays
    dirs = rays @ camera_pose.R.T
    P, hit = scene.intersect(camera_pose.t, dirs)
    val, ok = scene.texture.lookup(P[..., 0], P[..., 1])
    hit &= ok
    img = np.where(hit, val, 0.0)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return RenderResult(img, float(1.0 - hit.mean()))


def depth_map(scene, camera_pose, K, rays=None):
    """Camera-frame z of the ceiling at each pixel (inf on misses)."""
    rays = pixel_rays(K) if rays is None else rays
    dirs = rays @ camera_pose.R.T
    P, hit = scene.intersect(camera_pose.t, dirs)
    z = (P - camera_pose.t) @ camera_pose.R[:, 2]
    return np.where(hit, z, np.inf)


def quantize(img):
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def emit_dataset(scene, spec, fps, size, out, seed=0, noise_sigma=1.0, K=None, progress=None):
    """Render a sequence and write it in the dataset layout under ``out``.

    Per-frame noise is seeded from ``(seed, index)``, so re-running with the
    same arguments reproduces the directory byte for byte.
    """
    import os

    from . import dataset as ds
    from .evaluation import Trajectory

    size = tuple(size)
    K = default_intrinsics(size) if K is None else K
    gt = generate_trajectory(spec, fps)
    try:
        os.makedirs(os.path.join(out, "images"), exist_ok=True)
        rays = pixel_rays(K)
        misses = []
        for i, pose in enumerate(gt.poses):
            rng = np.random.default_rng([seed, i])
            res = render_frame(scene, pose, K, noise_sigma, rng, rays)
            misses.append(res.miss_fraction)
            ds.write_image(ds.image_path(out, i), quantize(res.image))
            if progress is not None:
                progress(i, len(gt))
        ds.write_times(os.path.join(out, "times.txt"), gt.times)
        ds.write_camera(os.path.join(out, "camera.txt"), K)
        ds.write_trajectory(os.path.join(out, "groundtruth.txt"),
                            Trajectory.from_poses(gt.times, gt.poses, "groundtruth"))
    except OSError as exc:
        raise ds.DatasetError(f"writing dataset to {out}: {exc}") from exc
    if max(misses, default=0.0) > 0:
        log.warning("ray misses in %d frames (max fraction %.4f)", sum(m > 0 for m in misses), max(misses))
    return out
