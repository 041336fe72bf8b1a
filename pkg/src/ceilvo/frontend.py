"""Per-frame processing: candidate selection, direct tracking, depth search, keyframe policy."""
from collections import deque
from dataclasses import dataclass, field
import logging

import numpy as np

from . import _kernels
from .backend import GAMMA, GRAD_C, PATTERN, PATTERN_RADIUS, huber_norm, huber_weight
from .geometry import Pose, exp, hat, project_many
from .photometry import AffineBrightness, brightness_scale

log = logging.getLogger(__name__)

D_MIN = 0.05
D_MAX = 2.0


class FrontendError(RuntimeError):
    pass


class NoPoints(FrontendError):
    pass


class DepthUnobservable(ValueError):
    pass


@dataclass
class FrontendConfig:
    block_size: int = 16
    grad_factor: float = 1.5
    grad_floor: float = 7.0
    target_count: int = 400
    pattern: np.ndarray = field(default_factory=lambda: PATTERN)
    pattern_radius: int = PATTERN_RADIUS
    gamma: float = GAMMA
    c: float = GRAD_C
    iterations_per_level: int = 10
    max_halvings: int = 4
    kf_flow_fraction: float = 0.02
    kf_delta_a: float = 0.2
    kf_residual_factor: float = 2.0
    residual_history: int = 30
    # per-residual weights of a pull on (a, b) toward their starting values;
    # without it a badly initialised alignment can flatten the contrast
    affine_prior: tuple = (100.0, 0.01)
    d_min: float = D_MIN
    d_max: float = D_MAX


# ------------------------------------------------------------ candidates

@dataclass
class CandidatePoint:
    u: int
    v: int
    grad: float
    status: str = "candidate"
    idepth: float = float("nan")
    d_min: float = D_MIN
    d_max: float = D_MAX
    tentative: bool = True

    @property
    def interval(self):
        return self.d_max - self.d_min


@dataclass
class CandidateSelection:
    points: list
    textureless: bool = False

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def uv(self):
        return np.array([(p.u, p.v) for p in self.points], dtype=np.float64).reshape(-1, 2)


def select_candidates(frame, target_count, config=None):
    """Pick at most one high-gradient pixel per block, spread over the image.

    Within each block the strongest pixel is kept if its gradient magnitude
    exceeds ``max(grad_factor * block median, grad_floor)``.  When more blocks
    qualify than ``target_count`` an evenly strided subset (raster order) is
    returned.  A selection below a quarter of the target is flagged as
    textureless.
    """
    cfg = config or FrontendConfig()
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    gm = frame.grad_norm(0)
    h, w = gm.shape
    B = cfg.block_size
    r = cfg.pattern_radius
    valid = np.zeros((h, w), dtype=bool)
    valid[r:h - r, r:w - r] = True
    nby, nbx = -(-h // B), -(-w // B)
    padded = np.full((nby * B, nbx * B), np.nan)
    padded[:h, :w] = np.where(valid, gm, np.nan)
    blocks = padded.reshape(nby, B, nbx, B).transpose(0, 2, 1, 3).reshape(nby, nbx, B * B)
    has = ~np.all(np.isnan(blocks), axis=2)
    safe = np.where(has[..., None], blocks, 0.0)
    with np.errstate(all="ignore"):
        med = np.nanmedian(np.where(has[..., None], blocks, 0.0), axis=2)
    thr = np.maximum(cfg.grad_factor * med, cfg.grad_floor)
    arg = np.argmax(np.where(np.isnan(safe), -np.inf, safe), axis=2)
    best = np.take_along_axis(safe, arg[..., None], axis=2)[..., 0]
    ok = has & (best > thr)
    by, bx = np.nonzero(ok)
    picks = []
    for y, x in zip(by, bx):
        a = arg[y, x]
        picks.append(CandidatePoint(int(x * B + a % B), int(y * B + a // B), float(best[y, x]),
                                    d_min=cfg.d_min, d_max=cfg.d_max))
    if len(picks) > target_count:
        keep = np.floor(np.arange(target_count) * len(picks) / target_count).astype(int)
        picks = [picks[k] for k in keep]
    textureless = len(picks) < 0.25 * target_count
    if textureless:
        log.warning("textureless frame: %d candidates for target %d", len(picks), target_count)
    return CandidateSelection(picks, textureless)


# -------------------------------------------------------------- tracking

@dataclass
class TrackingResult:
    pose: Pose
    affine: AffineBrightness
    level_residuals: list
    inlier_fraction: float
    converged: bool
    flow: float = 0.0
    delta_a: float = 0.0
    residual: float = 0.0
    # per level, coarse to fine: starting energy, then running totals of the
    # accepted changes measured on residuals valid before and after each step
    energy_trace: list = field(default_factory=list)


@dataclass
class _LevelRef:
    Xr: np.ndarray       # (N, P, 3) reference-camera points
    Ir: np.ndarray       # (N, P) reference intensities
    wp: np.ndarray       # (N, P)
    valid: np.ndarray    # (N, P) reference samples inside the image


def _level_reference(ref_frame, K, uv0, idepth, level, pattern):
    Kl = K.at_level(level)
    s = 0.5 ** level
    uv = (uv0 + 0.5) * s - 0.5
    q = uv[:, None, :] + pattern[None, :, :]
    img = ref_frame.levels[level]
    gx, gy = ref_frame.gradients[level]
    Ir, _, _, ok = _kernels.bilinear(img, q[..., 0], q[..., 1])
    ax, _, _, _ = _kernels.bilinear(gx, q[..., 0], q[..., 1])
    ay, _, _, _ = _kernels.bilinear(gy, q[..., 0], q[..., 1])
    xn = (q[..., 0] - Kl.cx) / Kl.fx
    yn = (q[..., 1] - Kl.cy) / Kl.fy
    d = idepth[:, None]
    Xr = np.stack([xn / d, yn / d, np.broadcast_to(1.0 / d, xn.shape)], axis=-1)
    return _LevelRef(Xr, Ir, ax * ax + ay * ay, ok), Kl


def _track_terms(ref, Kl, img, T, s, b_ref, b_new, gamma, c, jac):
    Xt = ref.Xr @ T.R.T + T.t
    Z = Xt[..., 2]
    front = Z > 1e-9
    iz = np.where(front, 1.0 / np.where(front, Z, 1.0), 0.0)
    u = np.where(front, Kl.fx * Xt[..., 0] * iz + Kl.cx, -1.0)
    v = np.where(front, Kl.fy * Xt[..., 1] * iz + Kl.cy, -1.0)
    It, gu, gv, ok = _kernels.bilinear(img, u, v)
    mask = ok & front & ref.valid
    hb = ref.Ir - b_ref
    r = np.where(mask, It - b_new - s * hb, 0.0)
    wp = c * c / (c * c + ref.wp)
    E = float(np.sum(wp * huber_norm(r, gamma) * mask))
    if not jac:
        return E, r, mask
    m = mask.astype(np.float64)
    gu = gu * m
    gv = gv * m
    g3 = np.stack([gu * Kl.fx * iz, gv * Kl.fy * iz,
                   -(gu * Kl.fx * Xt[..., 0] + gv * Kl.fy * Xt[..., 1]) * iz * iz], axis=-1)
    J = np.empty(r.shape + (8,))
    J[..., :3] = g3
    J[..., 3:6] = np.cross(Xt, g3)
    J[..., 6] = -s * hb * m
    J[..., 7] = -m
    W = wp * huber_weight(r, gamma) * mask
    Jf = J.reshape(-1, 8)
    Jw = Jf * W.reshape(-1, 1)
    H = Jw.T @ Jf
    g = -Jw.T @ r.reshape(-1)
    return E, r, mask, H, g


def _masked_energy(ref, r, mask, cfg):
    wp = cfg.c * cfg.c / (cfg.c * cfg.c + ref.wp)
    return float(np.sum(wp * huber_norm(r, cfg.gamma) * mask))


def track_frame(new, ref_kf, prior, K, config=None, points=None, affine0=None):
    """Coarse-to-fine direct alignment of ``new`` against a reference keyframe.

    Optimises the relative pose ``T_new_ref`` (reference camera to new
    camera) and the new frame's affine brightness.  ``points`` overrides the
    reference point set as ``(uv_level0, idepth)`` in reference coordinates.
    Each level runs Gauss-Newton with step halving; a step is accepted only
    if it does not raise the energy over residuals valid on both sides.
    Returns ``converged=False`` rather than raising when the image carries
    no usable gradient or no step could be taken.
    """
    cfg = config or FrontendConfig()
    uv0, idepth = (ref_kf.uv, ref_kf.idepth) if points is None else points
    if len(idepth) == 0:
        raise NoPoints("reference keyframe has no activated points")
    T = prior.copy()
    ab_ref = ref_kf.affine
    ab = (affine0 or ab_ref).copy()
    a0, b0 = ab.a, ab.b
    n_levels = min(len(new.levels), len(ref_kf.frame.levels))
    level_res = []
    trace = []
    converged = True
    inlier = 0.0
    well_posed = True
    for level in range(n_levels - 1, -1, -1):
        ref, Kl = _level_reference(ref_kf.frame, K, uv0, idepth, level, cfg.pattern)
        img = new.levels[level]

        def scale(a):
            return brightness_scale(ref_kf.exposure, new.exposure, ab_ref, AffineBrightness(a, 0.0))

        lam = np.array(cfg.affine_prior, dtype=np.float64) * ref.valid.size

        def prior_e(a, b):
            return 0.5 * (lam[0] * (a - a0) ** 2 + lam[1] * (b - b0) ** 2)

        def terms(T, a, b):
            E, r, mask, H, g = _track_terms(ref, Kl, img, T, scale(a), ab_ref.b, b, cfg.gamma, cfg.c, True)
            H[6, 6] += lam[0]
            H[7, 7] += lam[1]
            g[6] -= lam[0] * (a - a0)
            g[7] -= lam[1] * (b - b0)
            return E + prior_e(a, b), r, mask, H, g

        E, r, mask, H, g = terms(T, ab.a, ab.b)
        level_trace = [E]
        moved = False
        stalled_at_start = False
        for it in range(cfg.iterations_per_level):
            # damping relative to each diagonal entry; the affine block is orders
            # of magnitude smaller than the pose block
            dg = np.diag(H)
            try:
                step = np.linalg.solve(H + np.diag(dg * 1e-6 + 1e-12 * max(dg.max(), 1.0)), g)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(step)):
                break
            if np.abs(step).max() < 1e-10:
                break
            accepted = False
            alpha = 1.0
            for _ in range(cfg.max_halvings + 1):
                Tn = exp(alpha * step[:6]) @ T
                an = ab.a + alpha * step[6]
                bn = ab.b + alpha * step[7]
                En, rn, mn = _track_terms(ref, Kl, img, Tn, scale(an), ab_ref.b, bn, cfg.gamma, cfg.c, False)
                # compare on residuals valid before and after the step, so points
                # drifting across the image border neither reward nor block a step
                both = mask & mn
                dE = _masked_energy(ref, rn, both, cfg) + prior_e(an, bn) - \
                    _masked_energy(ref, r, both, cfg) - prior_e(ab.a, ab.b)
                if both.sum() >= 0.5 * max(mask.sum(), 1) and dE <= 0:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                if it == 0:
                    stalled_at_start = True
                break
            moved = True
            T, ab = Tn, AffineBrightness(an, bn)
            E, r, mask, H, g = terms(T, ab.a, ab.b)
            level_trace.append(level_trace[-1] + dE)
            if np.abs(alpha * step).max() < 1e-8:
                break
        trace.append(level_trace)
        if not (np.all(np.isfinite(H)) and np.isfinite(E) and np.all(np.isfinite(T.matrix()))):
            converged = well_posed = False
            level_res.append(float("inf"))
            break
        nvalid = int(mask.sum())
        level_res.append(float(np.sqrt(np.sum(r[mask] ** 2) / max(nvalid, 1))))
        if level == 0:
            inlier = float(np.sum(mask & (np.abs(r) < cfg.gamma)) / mask.size)
            evals = np.linalg.eigvalsh(H[:6, :6])
            well_posed = evals.min() > 1e-6 * max(evals.max(), 1e-300) and evals.max() > 1e-9
            if stalled_at_start and not moved:
                # no step helps: fine at a stationary point, a failure otherwise
                at_rest = np.abs(g).max() <= 1e-6 * max(np.abs(np.diag(H)).max(), 1.0)
                converged = bool(at_rest)
            if nvalid < 0.2 * mask.size:
                converged = False
    converged = converged and well_posed
    flow = mean_flow(K, uv0, idepth, T)
    return TrackingResult(T, ab, level_res[::-1], inlier, converged, flow,
                          ab.a - ab_ref.a, level_res[-1] if level_res else 0.0, trace)


def mean_flow(K, uv0, idepth, T):
    """Mean level-0 displacement of the reference points under ``T``."""
    if len(idepth) == 0:
        return 0.0
    xn = (uv0[:, 0] - K.cx) / K.fx
    yn = (uv0[:, 1] - K.cy) / K.fy
    X = np.stack([xn, yn, np.ones_like(xn)], axis=-1) / idepth[:, None]
    uv, z = project_many(K, T.apply(X))
    ok = z > 0
    if not np.any(ok):
        return float("inf")
    return float(np.mean(np.linalg.norm(uv[ok] - uv0[ok], axis=1)))


def rank_hypotheses(new, ref_kf, bases, K, config=None, points=None, affine0=None,
                    shift_step=12.0, shift_max=36.0, yaws=np.linspace(-0.4, 0.4, 17), keep=3):
    """Score pose guesses on the coarsest level and return the ``keep`` best.

    Each base pose is perturbed by an image-plane shift (a square grid in
    level-0 pixels) and a rotation about the camera axis.
    Scoring is the mean robust residual over points that stay in view, no
    optimisation, so a few thousand guesses cost well under a second.
    """
    cfg = config or FrontendConfig()
    uv0, idepth = (ref_kf.uv, ref_kf.idepth) if points is None else points
    if len(idepth) == 0:
        raise NoPoints("reference keyframe has no activated points")
    level = min(len(new.levels), len(ref_kf.frame.levels)) - 1
    ref, Kl = _level_reference(ref_kf.frame, K, uv0, idepth, level, cfg.pattern)
    img = new.levels[level]
    ab_ref = ref_kf.affine
    ab = (affine0 or ab_ref)
    s = brightness_scale(ref_kf.exposure, new.exposure, ab_ref, ab)
    # pixels to metric translation at the typical depth
    px = 1.0 / (K.fx * float(np.median(idepth)))
    g = np.arange(-shift_max, shift_max + 0.5 * shift_step, shift_step)
    offs = [(dx, dy) for dx in g for dy in g]
    scored = []
    for base in bases:
        for yaw in yaws:
            for dx, dy in offs:
                T = exp(np.array([dx * px, dy * px, 0.0, 0.0, 0.0, yaw])) @ base
                E, r, mask = _track_terms(ref, Kl, img, T, s, ab_ref.b, ab.b, cfg.gamma, cfg.c, False)
                n = int(mask.sum())
                if n < 0.3 * mask.size:
                    continue
                scored.append((E / n, len(scored), T))
    scored.sort(key=lambda x: (x[0], x[1]))
    return [T for _, _, T in scored[:keep]]


# ---------------------------------------------------------- depth search

def initialize_depth(candidate, host, target, dT, K, config=None, host_affine=None, target_affine=None,
                     gn_iterations=3):
    """Epipolar search for a candidate's inverse depth.

    ``dT`` maps host camera coordinates to target camera coordinates.  The
    inverse-depth interval is sampled at roughly one-pixel spacing along the
    epipolar segment and scored by pattern SSD after affine compensation.
    The best sample is refined by Gauss-Newton along the line and the
    interval is shrunk around it.  A second minimum within 10% of the best
    score marks the match ambiguous: the interval is widened and the
    hypothesis stays tentative.  Points invisible at every depth are dropped.
    """
    cfg = config or FrontendConfig()
    if np.linalg.norm(dT.t) <= 1e-12:
        raise DepthUnobservable("zero baseline: depth is unobservable")
    ha = host_affine or AffineBrightness()
    ta = target_affine or AffineBrightness()
    pat = cfg.pattern
    cand = CandidatePoint(**vars(candidate))
    q = np.array([cand.u, cand.v], dtype=np.float64) + pat
    hv, _, _, hok = _kernels.bilinear(host.image, q[:, 0], q[:, 1])
    s = brightness_scale(host.exposure, target.exposure, ha, ta)
    pred = ta.b + s * (hv - ha.b)
    rays = np.stack([(q[:, 0] - K.cx) / K.fx, (q[:, 1] - K.cy) / K.fy, np.ones(len(q))], axis=-1)
    Rr = rays @ dT.R.T

    def project(d):
        X = Rr[None, :, :] + d[:, None, None] * dT.t
        uv, z = project_many(K, X)
        return uv, z

    lo, hi = max(cand.d_min, 1e-6), cand.d_max
    uv_lo, _ = project(np.array([lo]))
    uv_hi, _ = project(np.array([hi]))
    length = float(np.linalg.norm(uv_hi[0, 0] - uv_lo[0, 0]))
    n = int(np.clip(np.ceil(length), 8, 2000)) + 1
    ds = np.linspace(lo, hi, n)
    uv, z = project(ds)
    val, _, _, ok = _kernels.bilinear(target.image, uv[..., 0], uv[..., 1])
    ok &= (z > 0) & hok[None, :]
    full = ok.all(axis=1)
    if not np.any(full):
        cand.status = "dropped"
        return cand
    ssd = np.where(full, np.sum((val - pred) ** 2, axis=1), np.inf)
    best = int(np.argmin(ssd))
    step = ds[1] - ds[0]
    # competing local minima away from the best sample
    interior = np.r_[False, (ssd[1:-1] <= ssd[:-2]) & (ssd[1:-1] <= ssd[2:]), False]
    interior[0] = ssd[0] <= ssd[1]
    interior[-1] = ssd[-1] <= ssd[-2]
    far = np.abs(np.arange(n) - best) > 2
    rivals = interior & far & np.isfinite(ssd)
    if np.any(rivals) and ssd[rivals].min() <= 1.1 * ssd[best] + 1e-9:
        span = hi - lo
        cand.d_min = max(cfg.d_min, lo - 0.25 * span)
        cand.d_max = min(cfg.d_max, hi + 0.25 * span)
        cand.tentative = True
        return cand
    d = ds[best]
    for _ in range(gn_iterations):
        uvd, zd = project(np.array([d]))
        X = Rr + d * dT.t
        vv, gu, gv, okd = _kernels.bilinear(target.image, uvd[0, :, 0], uvd[0, :, 1])
        if not okd.all():
            break
        iz = 1.0 / X[:, 2]
        du = K.fx * (dT.t[0] - X[:, 0] * iz * dT.t[2]) * iz
        dv = K.fy * (dT.t[1] - X[:, 1] * iz * dT.t[2]) * iz
        J = gu * du + gv * dv
        r = vv - pred
        JJ = float(J @ J)
        if JJ <= 1e-12:
            break
        dn = float(np.clip(d - (J @ r) / JJ, d - step, d + step))
        if dn <= 0:
            break
        d = dn
    cand.idepth = d
    cand.d_min = max(lo, d - step)
    cand.d_max = min(hi, d + step)
    if cand.d_max <= cand.d_min:
        cand.d_min, cand.d_max = max(1e-6, d - 0.5 * step), d + 0.5 * step
    cand.tentative = False
    return cand


# ---------------------------------------------------------- keyframes

def should_create_keyframe(result, config=None, image_diagonal=None, residual_median=None):
    """Keyframe when mean flow exceeds a fraction of the image diagonal, the
    brightness gain jumps, or the tracking residual doubles its recent median."""
    cfg = config or FrontendConfig()
    if image_diagonal is not None and result.flow > cfg.kf_flow_fraction * image_diagonal:
        return True
    if abs(result.delta_a) > cfg.kf_delta_a:
        return True
    if residual_median is not None and residual_median > 0 and result.residual > cfg.kf_residual_factor * residual_median:
        return True
    return False


class KeyframePolicy:
    """Keeps the running residual history used by :func:`should_create_keyframe`."""

    def __init__(self, config, image_diagonal):
        self.config = config
        self.diagonal = image_diagonal
        self.history = deque(maxlen=config.residual_history)

    def __call__(self, result):
        med = float(np.median(self.history)) if len(self.history) >= 5 else None
        decision = should_create_keyframe(result, self.config, self.diagonal, med)
        self.history.append(result.residual)
        return decision

    def reset_history(self):
        self.history.clear()
