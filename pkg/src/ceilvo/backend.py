"""Sliding-window photometric bundle adjustment.

Keyframe poses are stored camera-from-world, so ``T_j @ T_i^-1`` maps host
camera coordinates into target camera coordinates.  The parameter vector is
laid out per keyframe as ``[rho(3), omega(3), a, b]``, followed by one inverse
depth per hosted point (window order), followed by ``[fx, fy, cx, cy]`` when
intrinsics are optimised.  Pose increments are applied on the left.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg

from . import _kernels
from .geometry import Pose, exp, log, hat, rotation_angle
from .photometry import AffineBrightness, brightness_scale

log_ = logging.getLogger(__name__)

PATTERN = np.array([(0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1)],
                   dtype=np.float64)
PATTERN_RADIUS = 2
FRAME_DIM = 8
GAMMA = 9.0
GRAD_C = 50.0
MAX_WINDOW = 7


class BackendError(RuntimeError):
    pass


class InsufficientObservations(BackendError):
    pass


class SingularSystem(BackendError):
    pass


def huber_norm(alpha, gamma):
    """Huber penalty: quadratic below ``gamma``, linear above."""
    a = np.abs(np.asarray(alpha, dtype=np.float64))
    out = np.where(a < gamma, 0.5 * a * a, gamma * (a - 0.5 * gamma))
    return out if out.ndim else float(out)


def huber_weight(alpha, gamma):
    """IRLS weight ``min(1, gamma/|alpha|)`` that makes the quadratic model match Huber."""
    a = np.abs(np.asarray(alpha, dtype=np.float64))
    return np.where(a <= gamma, 1.0, gamma / np.maximum(a, 1e-300))


def gradient_weight(grad, c):
    """``c^2 / (c^2 + |grad|^2)``; down-weights high-gradient pixels."""
    g = np.asarray(grad, dtype=np.float64)
    return c * c / (c * c + np.sum(g * g, axis=-1))


@dataclass
class Keyframe:
    id: int
    frame: object
    pose: Pose
    affine: AffineBrightness = field(default_factory=AffineBrightness)
    uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    idepth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    _cache: dict = field(default_factory=dict, repr=False)
    idepth_prior: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.idepth_prior is None or len(self.idepth_prior) != len(self.idepth):
            self.idepth_prior = np.asarray(self.idepth, dtype=np.float64).copy()

    @property
    def n_points(self):
        return len(self.idepth)

    @property
    def exposure(self):
        return self.frame.exposure

    @property
    def timestamp(self):
        return self.frame.timestamp

    def set_points(self, uv, idepth, prior=None):
        """Replace the hosted points; ``prior`` defaults to the given inverse depths."""
        self.uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        self.idepth = np.asarray(idepth, dtype=np.float64).reshape(-1)
        self.idepth_prior = self.idepth.copy() if prior is None else \
            np.asarray(prior, dtype=np.float64).reshape(-1).copy()
        self._cache.clear()

    def keep_points(self, mask):
        self.set_points(self.uv[mask], self.idepth[mask], self.idepth_prior[mask])

    def host_pattern(self, pattern=PATTERN):
        """Host intensities and squared gradient norms at every pattern pixel, ``(N, P)`` each."""
        key = id(pattern)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is pattern:
            return hit[1], hit[2]
        q = self.uv[:, None, :] + pattern[None, :, :]
        ui = np.rint(q[..., 0]).astype(np.intp)
        vi = np.rint(q[..., 1]).astype(np.intp)
        img = self.frame.image
        gx, gy = self.frame.gradient
        vals = img[vi, ui]
        g2 = gx[vi, ui] ** 2 + gy[vi, ui] ** 2
        self._cache[key] = (pattern, vals, g2)
        return vals, g2


@dataclass
class WindowState:
    """Keyframes under joint optimisation plus the shared intrinsics."""

    keyframes: list
    K: object
    max_size: int = MAX_WINDOW
    optimize_intrinsics: bool = False
    gamma: float = GAMMA
    c: float = GRAD_C
    pattern: np.ndarray = field(default_factory=lambda: PATTERN)
    zeta0: dict = None
    x: np.ndarray = None
    # weight of a quadratic pull of each inverse depth toward its activation
    # value; keeps depths and scale anchored when the window lacks parallax
    depth_prior: float = 0.0

    def __len__(self):
        return len(self.keyframes)

    @property
    def n_points(self):
        return sum(kf.n_points for kf in self.keyframes)

    @property
    def frame_dim(self):
        return FRAME_DIM * len(self.keyframes) + (4 if self.optimize_intrinsics else 0)

    @property
    def dim(self):
        return FRAME_DIM * len(self.keyframes) + self.n_points + (4 if self.optimize_intrinsics else 0)

    def point_offsets(self):
        counts = [kf.n_points for kf in self.keyframes]
        return np.concatenate([[0], np.cumsum(counts)]).astype(int)

    def snapshot(self):
        return {
            "poses": [kf.pose.copy() for kf in self.keyframes],
            "affine": [kf.affine.copy() for kf in self.keyframes],
            "idepth": [kf.idepth.copy() for kf in self.keyframes],
            "K": self.K,
        }

    def restore(self, snap):
        for kf, T, ab, d in zip(self.keyframes, snap["poses"], snap["affine"], snap["idepth"]):
            kf.pose = T.copy()
            kf.affine = ab.copy()
            kf.idepth = d.copy()
        self.K = snap["K"]

    def delta_from(self, snap):
        """Tangent vector ``x`` with ``state == x (+) snap``."""
        nF = FRAME_DIM * len(self.keyframes)
        x = np.zeros(self.dim)
        for k, kf in enumerate(self.keyframes):
            x[FRAME_DIM * k:FRAME_DIM * k + 6] = log(kf.pose @ snap["poses"][k].inverse())
            x[FRAME_DIM * k + 6] = kf.affine.a - snap["affine"][k].a
            x[FRAME_DIM * k + 7] = kf.affine.b - snap["affine"][k].b
        offs = self.point_offsets()
        for k, kf in enumerate(self.keyframes):
            x[nF + offs[k]:nF + offs[k + 1]] = kf.idepth - snap["idepth"][k]
        if self.optimize_intrinsics:
            x[-4:] = self.K.vector() - snap["K"].vector()
        return x

    def apply_increment(self, delta):
        """Left-apply pose increments; add to affine, depth and intrinsics entries."""
        nF = FRAME_DIM * len(self.keyframes)
        offs = self.point_offsets()
        for k, kf in enumerate(self.keyframes):
            blk = delta[FRAME_DIM * k:FRAME_DIM * (k + 1)]
            kf.pose = exp(blk[:6]) @ kf.pose
            kf.affine = AffineBrightness(kf.affine.a + blk[6], kf.affine.b + blk[7])
            kf.idepth = kf.idepth + delta[nF + offs[k]:nF + offs[k + 1]]
        if self.optimize_intrinsics:
            self.K = self.K.with_vector(self.K.vector() + delta[-4:])


@dataclass
class PairTerms:
    """Residuals of all points of one host observed in one target keyframe, shape ``(N, P)``."""

    r: np.ndarray
    mask: np.ndarray
    wp: np.ndarray
    J_host: np.ndarray = None
    J_target: np.ndarray = None
    J_depth: np.ndarray = None
    J_K: np.ndarray = None


def pair_terms(host, target, K, pattern=PATTERN, c=GRAD_C, jacobians=False, uv=None, idepth=None):
    """Photometric residuals of ``host``'s points in ``target`` and optionally their Jacobians.

    Pattern pixels share the host point's inverse depth.  Rows whose
    projection leaves the target image or lands behind it are masked out and
    carry zero residual and Jacobian.
    """
    uv = host.uv if uv is None else uv
    d = host.idepth if idepth is None else idepth
    q = uv[:, None, :] + pattern[None, :, :]
    Ih, g2 = host.host_pattern(pattern) if uv is host.uv else _sample_host(host, q)
    wp = c * c / (c * c + g2)

    dT = target.pose @ host.pose.inverse()
    R, t = dT.R, dT.t
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = (q[..., 0] - K.cx) / K.fx
        yn = (q[..., 1] - K.cy) / K.fy
        dd = d[:, None]
        Xh = np.stack([xn / dd, yn / dd, np.broadcast_to(1.0 / dd, xn.shape)], axis=-1)
        Xt = Xh @ R.T + t
        Z = Xt[..., 2]
        front = (Z > 1e-9) & (dd > 0)
        iz = np.where(front, 1.0 / np.where(front, Z, 1.0), 0.0)
        u = K.fx * Xt[..., 0] * iz + K.cx
        v = K.fy * Xt[..., 1] * iz + K.cy
    u = np.where(front, u, -1.0)
    v = np.where(front, v, -1.0)
    It, gu, gv, ok = _kernels.bilinear(target.frame.image, u, v)
    mask = ok & front
    s = brightness_scale(host.exposure, target.exposure, host.affine, target.affine)
    hb = Ih - host.affine.b
    r = np.where(mask, (It - target.affine.b) - s * hb, 0.0)
    out = PairTerms(r, mask, wp)
    if not jacobians:
        return out

    m = mask.astype(np.float64)
    gu = gu * m
    gv = gv * m
    g3 = np.stack([gu * K.fx * iz, gv * K.fy * iz,
                   -(gu * K.fx * Xt[..., 0] + gv * K.fy * Xt[..., 1]) * iz * iz], axis=-1)
    gh = g3 @ R
    Jt = np.empty(r.shape + (FRAME_DIM,))
    Jt[..., :3] = g3
    Jt[..., 3:6] = np.cross(Xt, g3)
    Jt[..., 6] = -s * hb * m
    Jt[..., 7] = -m
    Jh = np.empty(r.shape + (FRAME_DIM,))
    Jh[..., :3] = -gh
    Jh[..., 3:6] = np.cross(gh, Xh)
    Jh[..., 6] = s * hb * m
    Jh[..., 7] = s * m
    Jd = -np.einsum("npk,npk->np", gh, Xh) / dd
    out.J_host, out.J_target, out.J_depth = Jh, Jt, Jd
    JK = np.empty(r.shape + (4,))
    JK[..., 0] = gu * Xt[..., 0] * iz - gh[..., 0] * xn / (K.fx * dd)
    JK[..., 1] = gv * Xt[..., 1] * iz - gh[..., 1] * yn / (K.fy * dd)
    JK[..., 2] = gu - gh[..., 0] / (K.fx * dd)
    JK[..., 3] = gv - gh[..., 1] / (K.fy * dd)
    out.J_K = JK
    return out


def _sample_host(host, q):
    Ih, _, _, _ = _kernels.bilinear(host.frame.image, q[..., 0], q[..., 1])
    gx, gy = host.frame.gradient
    ax, _, _, _ = _kernels.bilinear(gx, q[..., 0], q[..., 1])
    ay, _, _, _ = _kernels.bilinear(gy, q[..., 0], q[..., 1])
    return Ih, ax * ax + ay * ay


def residual(point, host_kf, target_kf, K, pattern=PATTERN):
    """Residuals of one point over its pattern, plus the validity mask.

    ``point`` is ``(u, v, idepth)`` in host level-0 pixels.
    """
    u, v, d = point
    terms = pair_terms(host_kf, target_kf, K, pattern,
                       uv=np.array([[u, v]], dtype=np.float64), idepth=np.array([d], dtype=np.float64))
    return terms.r[0], terms.mask[0]


def _pairs(window):
    n = len(window.keyframes)
    for h in range(n):
        if window.keyframes[h].n_points == 0:
            continue
        for t in range(n):
            if t != h:
                yield h, t


def prior_energy(window):
    """``0.5 * depth_prior * sum (d - d_prior)^2`` over the window's points."""
    lam = window.depth_prior
    if not lam:
        return 0.0
    return 0.5 * lam * sum(float(np.sum((kf.idepth - kf.idepth_prior) ** 2))
                           for kf in window.keyframes if kf.n_points)


def total_energy(window, gamma=None, c=None):
    """Sum of gradient-weighted Huber penalties over every unmasked residual in the window."""
    gamma = window.gamma if gamma is None else gamma
    c = window.c if c is None else c
    E = 0.0
    for h, t in _pairs(window):
        pt = pair_terms(window.keyframes[h], window.keyframes[t], window.K, window.pattern, c)
        E += float(np.sum(pt.wp * huber_norm(pt.r, gamma) * pt.mask))
    return E


@dataclass
class GaussNewtonSystem:
    """Normal equations in block form.

    ``H_ff`` couples frame (and intrinsics) parameters, ``H_fd`` frames with
    point depths, ``h_dd`` is the diagonal depth block.
    """

    H_ff: np.ndarray
    H_fd: np.ndarray
    h_dd: np.ndarray
    b_f: np.ndarray
    b_d: np.ndarray
    energy: float
    n: int

    @property
    def dim(self):
        return len(self.b_f) + len(self.b_d)

    @property
    def H(self):
        nf = len(self.b_f)
        H = np.zeros((self.dim, self.dim))
        H[:nf, :nf] = self.H_ff
        H[:nf, nf:] = self.H_fd
        H[nf:, :nf] = self.H_fd.T
        H[nf:, nf:] = np.diag(self.h_dd)
        return self._reorder(H)

    @property
    def b(self):
        return self._reorder(np.concatenate([self.b_f, self.b_d]))

    # intrinsics sit last in the public layout but next to the frames internally
    _n_frames: int = 0
    _with_K: bool = False

    def _reorder(self, a):
        if not self._with_K:
            return a
        nF = FRAME_DIM * self._n_frames
        nf = len(self.b_f)
        perm = np.concatenate([np.arange(nF), np.arange(nf, self.dim), np.arange(nF, nf)])
        return a[np.ix_(perm, perm)] if a.ndim == 2 else a[perm]


def build_system(window, gamma=None, c=None):
    """Accumulate ``H = J^T W J`` and ``b = -J^T W r`` for the whole window."""
    gamma = window.gamma if gamma is None else gamma
    c = window.c if c is None else c
    kfs = window.keyframes
    if len(kfs) < 2:
        raise InsufficientObservations("need at least two keyframes")
    n_kf = len(kfs)
    withK = window.optimize_intrinsics
    nF = FRAME_DIM * n_kf
    nf = nF + (4 if withK else 0)
    offs = window.point_offsets()
    P = int(offs[-1])
    H_ff = np.zeros((nf, nf))
    H_fd = np.zeros((nf, P))
    h_dd = np.zeros(P)
    b_f = np.zeros(nf)
    b_d = np.zeros(P)
    energy = 0.0
    count = 0
    for h, t in _pairs(window):
        pt = pair_terms(kfs[h], kfs[t], window.K, window.pattern, c, jacobians=True)
        nvalid = int(pt.mask.sum())
        if nvalid == 0:
            continue
        count += nvalid
        energy += float(np.sum(pt.wp * huber_norm(pt.r, gamma) * pt.mask))
        W = pt.wp * huber_weight(pt.r, gamma) * pt.mask
        cols = [pt.J_host, pt.J_target] + ([pt.J_K] if withK else [])
        Jc = np.concatenate(cols, axis=-1)
        idx = np.r_[FRAME_DIM * h:FRAME_DIM * (h + 1), FRAME_DIM * t:FRAME_DIM * (t + 1)]
        if withK:
            idx = np.r_[idx, nF:nF + 4]
        Jw = Jc * W[..., None]
        flatJ = Jc.reshape(-1, Jc.shape[-1])
        flatJw = Jw.reshape(-1, Jc.shape[-1])
        H_ff[np.ix_(idx, idx)] += flatJw.T @ flatJ
        b_f[idx] -= flatJw.T @ pt.r.reshape(-1)
        sl = slice(offs[h], offs[h + 1])
        H_fd[idx, sl] += np.einsum("npk,np->kn", Jw, pt.J_depth)
        h_dd[sl] += np.sum(W * pt.J_depth ** 2, axis=1)
        b_d[sl] -= np.sum(W * pt.J_depth * pt.r, axis=1)
    if count == 0:
        raise InsufficientObservations("no residual links two keyframes")
    if window.depth_prior and P:
        d = np.concatenate([kf.idepth for kf in kfs])
        d0 = np.concatenate([kf.idepth_prior for kf in kfs])
        h_dd += window.depth_prior
        b_d -= window.depth_prior * (d - d0)
        energy += prior_energy(window)
    sysm = GaussNewtonSystem(H_ff, H_fd, h_dd, b_f, b_d, energy, count)
    sysm._n_frames = n_kf
    sysm._with_K = withK
    return sysm


def solve_damped(system, mu, fixed, depths=True):
    """Solve ``(H + mu diag(H)) delta = b`` via the Schur complement on depths.

    ``fixed`` lists frame-block indices held constant (gauge).  With
    ``depths=False`` the depths are held and only the frame block is solved.
    Returns the increment in internal layout ``[frames (+K), depths]``.
    """
    nf = len(system.b_f)
    free = np.setdiff1d(np.arange(nf), fixed)
    Hff = system.H_ff + mu * np.diag(np.diag(system.H_ff))
    Hfd = system.H_fd
    if depths:
        hdd = system.h_dd * (1.0 + mu) + 1e-12
        inv_dd = 1.0 / hdd
    else:
        inv_dd = np.zeros_like(system.h_dd)
    S = Hff - (Hfd * inv_dd) @ Hfd.T
    rhs = system.b_f - Hfd @ (inv_dd * system.b_d)
    S = S[np.ix_(free, free)]
    S = 0.5 * (S + S.T)
    # keep unobserved parameters (empty rows) solvable
    diag = np.diag(S).copy()
    S[np.diag_indices_from(S)] = np.where(diag > 0, diag, 1.0)
    cf = scipy.linalg.cho_factor(S)
    df = np.zeros(nf)
    df[free] = scipy.linalg.cho_solve(cf, rhs[free])
    dd = inv_dd * (system.b_d - Hfd.T @ df)
    return np.concatenate([df, dd])


def _to_public(window, delta_internal):
    nF = FRAME_DIM * len(window.keyframes)
    if not window.optimize_intrinsics:
        return delta_internal
    frames = delta_internal[:nF]
    K = delta_internal[nF:nF + 4]
    depths = delta_internal[nF + 4:]
    return np.concatenate([frames, depths, K])


def _clamp_depths(window, min_idepth=1e-4):
    for kf in window.keyframes:
        if kf.n_points:
            kf.idepth = np.maximum(kf.idepth, min_idepth)


@dataclass
class OptimizeResult:
    energies: list
    iterations: int
    mu: float


def optimize_window(window, iterations=6, mu0=1e-5, mu_max=1e4, fixed_frames=(0,), pose_warmup=3):
    """Levenberg-damped Gauss-Newton over the window.

    Runs until ``iterations`` steps have been accepted or damping exceeds
    ``mu_max`` without an energy decrease.  The gauge is fixed by holding the
    pose and affine parameters of ``fixed_frames`` constant.  The first
    ``pose_warmup`` accepted steps hold the depths, so a badly placed frame
    is pulled back by the map before its error can drag points into a
    neighbouring texture minimum.  Returns the trace of accepted energies
    (initial energy first).
    """
    window.zeta0 = window.snapshot()
    system = build_system(window)
    energies = [system.energy]
    fixed = np.concatenate([np.arange(FRAME_DIM * k, FRAME_DIM * (k + 1)) for k in fixed_frames]).astype(int)
    mu = mu0
    accepted = 0
    while accepted < iterations:
        warm = accepted < pose_warmup
        try:
            delta = solve_damped(system, mu, fixed, depths=not warm)
        except np.linalg.LinAlgError:
            if mu >= mu_max:
                raise SingularSystem(f"damped solve failed at mu={mu:g}")
            mu *= 10.0
            continue
        backup = window.snapshot()
        window.apply_increment(_to_public(window, delta))
        _clamp_depths(window)
        E = total_energy(window) + prior_energy(window)
        if np.isfinite(E) and E <= energies[-1]:
            accepted += 1
            energies.append(E)
            mu = max(mu / 10.0, 1e-12)
            if accepted == iterations:
                break
            try:
                system = build_system(window)
            except InsufficientObservations:
                break
            if np.abs(system.b_f).max(initial=0.0) < 1e-10 and np.abs(system.b_d).max(initial=0.0) < 1e-10:
                break
        else:
            window.restore(backup)
            mu *= 10.0
            if mu > mu_max:
                break
    window.x = window.delta_from(window.zeta0)
    return OptimizeResult(energies, accepted, mu)


def point_energies(window, gamma=None, c=None):
    """Per-point mean Huber energy and number of valid residuals, aligned with window point order."""
    gamma = window.gamma if gamma is None else gamma
    c = window.c if c is None else c
    offs = window.point_offsets()
    P = int(offs[-1])
    E = np.zeros(P)
    cnt = np.zeros(P)
    for h, t in _pairs(window):
        pt = pair_terms(window.keyframes[h], window.keyframes[t], window.K, window.pattern, c)
        sl = slice(offs[h], offs[h + 1])
        E[sl] += np.sum(huber_norm(pt.r, gamma) * pt.mask, axis=1)
        cnt[sl] += pt.mask.sum(axis=1)
    return E, cnt


def visible_fraction(window, kf, target):
    """Fraction of ``kf``'s points that project inside ``target`` with positive depth."""
    if kf.n_points == 0:
        return 0.0
    terms = pair_terms(kf, target, window.K, PATTERN[:1], window.c)
    return float(terms.mask[:, 0].mean())


def select_marginalization(window, min_visible=0.05):
    """Index of the keyframe to drop: the oldest, unless an older-than-newest
    keyframe keeps fewer than ``min_visible`` of its points in view."""
    newest = window.keyframes[-1]
    worst, worst_frac = None, min_visible
    for k, kf in enumerate(window.keyframes[:-1]):
        if k == 0:
            continue
        frac = visible_fraction(window, kf, newest)
        if frac < worst_frac:
            worst, worst_frac = k, frac
    return 0 if worst is None else worst


def marginalize(window, max_size=None):
    """Drop keyframes (and their hosted points) until the window holds ``max_size``.

    Dropped states are removed outright; no prior is retained.
    """
    max_size = window.max_size if max_size is None else max_size
    removed = []
    while len(window.keyframes) > max_size:
        k = select_marginalization(window)
        removed.append(window.keyframes.pop(k))
    return removed


def pose_error(Ta, Tb):
    """Translation distance (m) and rotation angle (deg) between two camera-from-world poses,
    measured on the camera centres and orientations."""
    ca = -Ta.R.T @ Ta.t
    cb = -Tb.R.T @ Tb.t
    return float(np.linalg.norm(ca - cb)), float(np.degrees(rotation_angle(Ta.R @ Tb.R.T)))
