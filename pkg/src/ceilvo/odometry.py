"""Frame-by-frame direct sparse odometry: tracking, keyframing and windowed optimisation."""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.spatial import cKDTree

from . import backend as be
from .frontend import (DepthUnobservable, FrontendConfig, KeyframePolicy, initialize_depth,
                       rank_hypotheses, select_candidates, track_frame)
from .geometry import Pose, project_many

log = logging.getLogger(__name__)


@dataclass
class OdometryConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    window: int = be.MAX_WINDOW
    gamma: float = be.GAMMA
    c: float = be.GRAD_C
    ba_iterations: int = 6
    # new keyframes arrive tracked against the current map, so the window
    # optimisation needs no depth-held warm-up steps
    ba_pose_warmup: int = 0
    optimize_intrinsics: bool = False
    max_point_energy: float = 0.5 * 9.0 ** 2
    epipolar_refine: bool = True
    # pull of each inverse depth toward its activation value, per unit depth^2
    depth_prior: float = 1e3
    # epipolar refinement only for candidates farther than this from any map
    # point, and only when the search sweeps at least this many pixels
    refine_support_px: float = 12.0
    refine_min_sweep_px: float = 8.0
    # below this inlier fraction the motion priors are deemed wrong and a
    # coarse search over shifted and rotated guesses is tried
    recover_inlier: float = 0.5


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    keyframe: bool
    converged: bool
    ref_id: int
    T_rel: Pose
    warning: str = ""


class DirectOdometry:
    """Monocular direct sparse odometry over photometrically corrected frames.

    Poses are kept camera-from-world internally; :meth:`trajectory` returns
    camera-to-world poses.
    """

    def __init__(self, K, config=None):
        self.K = K
        self.cfg = config or OdometryConfig()
        self.window = be.WindowState([], K, self.cfg.window, self.cfg.optimize_intrinsics,
                                     self.cfg.gamma, self.cfg.c, self.cfg.frontend.pattern,
                                     depth_prior=self.cfg.depth_prior)
        self.keyframes = {}
        self.records = []
        self.policy = KeyframePolicy(self.cfg.frontend, K.diagonal)
        self._last = None
        self._prev = None
        self._last_affine = None
        self._next_id = 0
        self.warnings = 0
        self.recoveries = 0

    # ----------------------------------------------------------- public

    @property
    def n_keyframes(self):
        return len(self.keyframes)

    def process(self, frame):
        """Track one frame and promote it to a keyframe when the policy asks for it."""
        if not self.window.keyframes:
            return self._bootstrap_first(frame)
        ref = self.window.keyframes[-1]
        uv, idepth = self._reference_points(ref)
        warning = ""
        if len(idepth) == 0:
            res = None
        else:
            priors = self._priors(ref)
            res = self._track(frame, ref, priors, uv, idepth)
            if not self._good(res):
                # motion priors failed, typically a fast turn or a large step
                guesses = rank_hypotheses(frame, ref, priors, self.K, self.cfg.frontend,
                                          points=(uv, idepth), affine0=self._last_affine)
                alt = self._track(frame, ref, guesses, uv, idepth, stop_when_good=False)
                if self._better(alt, res):
                    res = alt
                self.recoveries += 1
        if res is None or not res.converged:
            self.warnings += 1
            warning = "tracking-lost" if res is None else "not-converged"
            T_rel = self._priors(ref)[0] if res is None or not np.isfinite(res.residual) else res.pose
        else:
            T_rel = res.pose
        T_world = T_rel @ ref.pose
        self._prev, self._last = self._last, T_world
        if res is not None:
            self._last_affine = res.affine
        make_kf = res is not None and res.converged and self.policy(res)
        if make_kf:
            kf = self._new_keyframe(frame, T_world, res.affine)
            rec = FrameRecord(frame.index, frame.timestamp, True, res.converged, kf.id, Pose(), warning)
            self.policy.reset_history()
        else:
            rec = FrameRecord(frame.index, frame.timestamp, False, bool(res is not None and res.converged),
                              ref.id, T_rel, warning)
        self.records.append(rec)
        return rec

    def trajectory(self):
        """``(timestamps, camera-to-world poses)`` of every processed frame."""
        times, poses = [], []
        for rec in self.records:
            T = rec.T_rel @ self.keyframes[rec.ref_id].pose
            times.append(rec.timestamp)
            poses.append(T.inverse())
        return np.array(times), poses

    # ---------------------------------------------------------- internals

    def _good(self, r):
        return r is not None and r.converged and r.inlier_fraction >= self.cfg.recover_inlier

    @staticmethod
    def _better(r, best):
        if best is None:
            return True
        if r.converged != best.converged:
            return r.converged
        return r.inlier_fraction > best.inlier_fraction

    def _track(self, frame, ref, priors, uv, idepth, stop_when_good=True):
        best = None
        for prior in priors:
            r = track_frame(frame, ref, prior, self.K, self.cfg.frontend, points=(uv, idepth),
                            affine0=self._last_affine)
            if self._better(r, best):
                best = r
            if stop_when_good and self._good(r):
                break
        return best

    def _priors(self, ref):
        ident = self._last @ ref.pose.inverse() if self._last is not None else Pose()
        if self._last is None or self._prev is None:
            return [ident]
        vel = self._last @ self._prev.inverse()
        return [vel @ self._last @ ref.pose.inverse(), ident]

    def _reference_points(self, ref):
        """All window points expressed in the reference keyframe, level-0 pixels and inverse depth."""
        K = self.K
        r = self.cfg.frontend.pattern_radius + 1
        uvs, ds = [], []
        for kf in self.window.keyframes:
            if kf.n_points == 0:
                continue
            if kf is ref:
                uvs.append(kf.uv)
                ds.append(kf.idepth)
                continue
            xn = (kf.uv[:, 0] - K.cx) / K.fx
            yn = (kf.uv[:, 1] - K.cy) / K.fy
            X = np.stack([xn, yn, np.ones_like(xn)], axis=-1) / kf.idepth[:, None]
            Xr = (ref.pose @ kf.pose.inverse()).apply(X)
            uv, z = project_many(K, Xr)
            ok = (z > 0) & (uv[:, 0] >= r) & (uv[:, 0] <= K.width - 1 - r) \
                & (uv[:, 1] >= r) & (uv[:, 1] <= K.height - 1 - r)
            uvs.append(uv[ok])
            ds.append(1.0 / z[ok])
        if not uvs:
            return np.zeros((0, 2)), np.zeros(0)
        return np.concatenate(uvs), np.concatenate(ds)

    def _alloc_id(self):
        i = self._next_id
        self._next_id += 1
        return i

    def _bootstrap_first(self, frame):
        sel = select_candidates(frame, self.cfg.frontend.target_count, self.cfg.frontend)
        if sel.textureless:
            self.warnings += 1
        kf = be.Keyframe(self._alloc_id(), frame, Pose())
        uv = sel.uv()
        kf.set_points(uv, np.ones(len(uv)))
        self.window.keyframes.append(kf)
        self.keyframes[kf.id] = kf
        self._last = Pose()
        rec = FrameRecord(frame.index, frame.timestamp, True, True, kf.id, Pose(),
                          "textureless" if sel.textureless else "")
        self.records.append(rec)
        return rec

    def _depth_prior(self, kf, uv):
        """Inverse depths for new candidates from the window's points projected into ``kf``,
        and the pixel distance to the nearest supporting point."""
        K = self.K
        P, D = [], []
        for other in self.window.keyframes:
            if other.n_points == 0:
                continue
            xn = (other.uv[:, 0] - K.cx) / K.fx
            yn = (other.uv[:, 1] - K.cy) / K.fy
            X = np.stack([xn, yn, np.ones_like(xn)], axis=-1) / other.idepth[:, None]
            uvp, z = project_many(K, (kf.pose @ other.pose.inverse()).apply(X))
            ok = z > 0
            P.append(uvp[ok])
            D.append(1.0 / z[ok])
        if not P or sum(len(p) for p in P) == 0:
            return np.ones(len(uv)), np.full(len(uv), np.inf)
        P = np.concatenate(P)
        D = np.concatenate(D)
        k = min(8, len(D))
        dist, idx = cKDTree(P).query(uv, k=k)
        idx = np.asarray(idx).reshape(len(uv), -1)
        dist = np.asarray(dist).reshape(len(uv), -1)
        w = 1.0 / (dist + 5.0)
        return np.sum(D[idx] * w, axis=1) / np.sum(w, axis=1), dist[:, 0]

    def _new_keyframe(self, frame, T_world, affine):
        cfg = self.cfg
        prev = self.window.keyframes[-1]
        kf = be.Keyframe(self._alloc_id(), frame, T_world, affine.copy())
        sel = select_candidates(frame, cfg.frontend.target_count, cfg.frontend)
        if sel.textureless:
            self.warnings += 1
        uv = sel.uv()
        d0, support = self._depth_prior(kf, uv)
        if cfg.epipolar_refine and len(uv):
            d0 = self._refine_depths(sel, d0, kf, support > cfg.refine_support_px)
        keep = np.isfinite(d0) & (d0 > 0)
        kf.set_points(uv[keep], d0[keep])
        bootstrap = len(self.window.keyframes) == 1
        self.window.keyframes.append(kf)
        self.keyframes[kf.id] = kf
        be.marginalize(self.window, cfg.window)
        # the first window has only placeholder depths, so nothing to anchor to
        self.window.depth_prior = 0.0 if bootstrap else cfg.depth_prior
        try:
            be.optimize_window(self.window, cfg.ba_iterations, pose_warmup=cfg.ba_pose_warmup)
        except be.BackendError as exc:
            log.warning("window optimisation failed: %s", exc)
            self.warnings += 1
        self.window.depth_prior = cfg.depth_prior
        if bootstrap:
            self._normalize_scale()
            for k in self.window.keyframes:
                k.idepth_prior = k.idepth.copy()
        self._prune_points()
        return kf

    def _refine_depths(self, sel, d0, kf, todo):
        """Epipolar search for candidates the projected map does not cover."""
        if not todo.any():
            return d0
        # widest baseline in the window gives the sharpest epipolar constraint
        base = [np.linalg.norm((o.pose @ kf.pose.inverse()).t) for o in self.window.keyframes]
        prev = self.window.keyframes[int(np.argmax(base))]
        dT = prev.pose @ kf.pose.inverse()
        # disparity swept by the search interval; too short and the match is noise
        sweep = self.K.fx * np.linalg.norm(dT.t) * np.median(d0) * (1 / 0.6 - 0.6)
        if sweep < self.cfg.refine_min_sweep_px:
            return d0
        out = d0.copy()
        fc = self.cfg.frontend
        for k in np.flatnonzero(todo):
            cand = sel.points[k]
            cand.d_min = max(fc.d_min * 0.1, d0[k] * 0.6)
            cand.d_max = d0[k] / 0.6
            try:
                c2 = initialize_depth(cand, kf.frame, prev.frame, dT, self.K, fc, kf.affine, prev.affine)
            except DepthUnobservable:
                return d0
            if c2.status != "dropped" and not c2.tentative and np.isfinite(c2.idepth):
                out[k] = c2.idepth
        return out

    def _normalize_scale(self):
        d = np.concatenate([kf.idepth for kf in self.window.keyframes if kf.n_points])
        if len(d) == 0:
            return
        s = float(np.mean(d))
        if not s > 0:
            return
        for kf in self.window.keyframes:
            kf.idepth = kf.idepth / s
            kf.pose = Pose(kf.pose.R, kf.pose.t * s)
        if self._last is not None:
            self._last = Pose(self._last.R, self._last.t * s)
        if self._prev is not None:
            self._prev = Pose(self._prev.R, self._prev.t * s)
        for rec in self.records:
            rec.T_rel = Pose(rec.T_rel.R, rec.T_rel.t * s)

    def _prune_points(self):
        E, cnt = be.point_energies(self.window)
        offs = self.window.point_offsets()
        for k, kf in enumerate(self.window.keyframes):
            if kf.n_points == 0:
                continue
            e = E[offs[k]:offs[k + 1]]
            n = cnt[offs[k]:offs[k + 1]]
            mean_e = np.where(n > 0, e / np.maximum(n, 1), 0.0)
            keep = (mean_e < self.cfg.max_point_energy) & (kf.idepth > 1e-3) & (kf.idepth < 50.0)
            if kf is not self.window.keyframes[-1]:
                keep &= n > 0
            if not keep.all():
                kf.keep_points(keep)
