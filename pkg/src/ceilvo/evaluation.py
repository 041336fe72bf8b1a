"""Trajectory synchronisation, similarity alignment and error statistics."""
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_to_rot, rot_to_quat, rotation_angle


class EvaluationError(ValueError):
    pass


class EmptyPairing(EvaluationError):
    pass


class DegenerateConfiguration(EvaluationError):
    pass


@dataclass
class Trajectory:
    """Timestamped positions with unit quaternions ``(qx, qy, qz, qw)``."""

    times: np.ndarray
    positions: np.ndarray
    quats: np.ndarray = None
    label: str = "estimate"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.quats is None:
            self.quats = np.tile([0.0, 0.0, 0.0, 1.0], (len(self.times), 1))
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        if not (len(self.times) == len(self.positions) == len(self.quats)):
            raise EvaluationError("times, positions and orientations differ in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise EvaluationError("timestamps must be strictly increasing")
        n = np.linalg.norm(self.quats, axis=1)
        if len(n) and np.abs(n - 1.0).max() > 1e-9:
            self.quats = self.quats / n[:, None]

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_poses(cls, times, poses, label="estimate"):
        """From camera-to-world :class:`~ceilvo.geometry.Pose` objects."""
        pos = np.array([p.t for p in poses]).reshape(-1, 3)
        q = np.array([rot_to_quat(p.R) for p in poses]).reshape(-1, 4)
        return cls(times, pos, q, label)

    def subset(self, idx):
        return Trajectory(self.times[idx], self.positions[idx], self.quats[idx], self.label)

    def rotations(self):
        return np.array([quat_to_rot(q) for q in self.quats])

    def path_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


@dataclass
class SimilarityTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply_points(self, P):
        return self.scale * np.asarray(P) @ self.R.T + self.t

    def compose(self, other):
        """``self o other``: apply ``other`` first."""
        return SimilarityTransform(self.R @ other.R, self.scale * self.R @ other.t + self.t,
                                   self.scale * other.scale)

    def inverse(self):
        Ri = self.R.T
        return SimilarityTransform(Ri, -Ri @ self.t / self.scale, 1.0 / self.scale)


def default_tau(G, P):
    """Half the shorter median inter-sample period of the two trajectories."""
    periods = [np.median(np.diff(T.times)) for T in (G, P) if len(T) > 1]
    return 0.5 * min(periods) if periods else 1e-3


def synchronize(G, P, tau=None):
    """Pair ground-truth and estimate samples whose timestamps differ by less than ``tau``.

    Greedy nearest-timestamp matching in time order; every sample is used at
    most once and pairs never cross, so both outputs stay time-ordered.
    Returns ``(G', P')`` of equal length.
    """
    tau = default_tau(G, P) if tau is None else tau
    if not tau > 0:
        raise EvaluationError("tau must be positive")
    tg, tp = G.times, P.times
    gi, pi = [], []
    j = 0
    for i, t in enumerate(tg):
        while j < len(tp) and tp[j] <= t - tau:
            j += 1
        best, best_dt = -1, tau
        k = j
        while k < len(tp) and tp[k] < t + tau:
            dt = abs(tp[k] - t)
            if dt < best_dt:
                best, best_dt = k, dt
            k += 1
        if best >= 0:
            gi.append(i)
            pi.append(best)
            j = best + 1
    if not gi:
        raise EmptyPairing(f"no samples within tau={tau:g} s; widen --tau")
    return G.subset(np.array(gi)), P.subset(np.array(pi))


def align_similarity(G, P, planar=False):
    """Closed-form least-squares similarity mapping ``P`` onto ``G``.

    Minimises ``sum |g_i - (s R p_i + t)|^2`` by centroid subtraction, SVD of
    the cross-covariance with a determinant-sign correction, and scale from
    the variance ratio.  ``planar=True`` restricts ``R`` to yaw.
    """
    g = G.positions if isinstance(G, Trajectory) else np.asarray(G, dtype=np.float64)
    p = P.positions if isinstance(P, Trajectory) else np.asarray(P, dtype=np.float64)
    n = len(g)
    if n != len(p):
        raise EvaluationError("point sets differ in length")
    if n < 3:
        raise DegenerateConfiguration("need at least three pairs")
    mg, mp = g.mean(axis=0), p.mean(axis=0)
    gc, pc = g - mg, p - mp
    var_p = float(np.mean(np.sum(pc * pc, axis=1)))
    sv = np.linalg.svd(pc, compute_uv=False)
    if var_p <= 1e-24 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("points are coincident or collinear")
    if planar:
        gc2, pc2 = gc[:, :2], pc[:, :2]
        C = gc2.T @ pc2 / n
        ang = np.arctan2(C[1, 0] - C[0, 1], C[0, 0] + C[1, 1])
        c, s = np.cos(ang), np.sin(ang)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        scale = float(np.sum((pc @ R.T) * gc) / n / var_p)
    else:
        C = gc.T @ pc / n
        U, D, Vt = np.linalg.svd(C)
        S = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1.0
        R = U @ S @ Vt
        scale = float(np.trace(np.diag(D) @ S) / var_p)
    if not scale > 0:
        raise DegenerateConfiguration("non-positive scale")
    t = mg - scale * R @ mp
    return SimilarityTransform(R, t, scale)


def apply_similarity(S, P):
    """Map every position to ``s R p + t`` and rotate orientations by ``R``."""
    pos = S.apply_points(P.positions)
    quats = np.array([rot_to_quat(S.R @ quat_to_rot(q)) for q in P.quats]).reshape(-1, 4)
    return Trajectory(P.times.copy(), pos, quats, P.label)


def alignment_cost(G, P, S):
    g = G.positions if isinstance(G, Trajectory) else G
    p = P.positions if isinstance(P, Trajectory) else P
    return float(np.sum((g - S.apply_points(p)) ** 2))


@dataclass
class ErrorSeries:
    distance: np.ndarray
    epsilon: np.ndarray


def relative_errors(G, P):
    """Per-pair position error norms against cumulative ground-truth arc length."""
    eps = np.linalg.norm(G.positions - P.positions, axis=1)
    steps = np.linalg.norm(np.diff(G.positions, axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    return ErrorSeries(dist, eps)


def binned_errors(series, bin_size=0.5):
    """Median error per traveled-distance bin: ``(bin_centres, medians, counts)``."""
    if len(series.distance) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=int)
    idx = np.floor(series.distance / bin_size).astype(int)
    centres, meds, counts = [], [], []
    for b in np.unique(idx):
        sel = idx == b
        centres.append((b + 0.5) * bin_size)
        meds.append(float(np.median(series.epsilon[sel])))
        counts.append(int(sel.sum()))
    return np.array(centres), np.array(meds), np.array(counts)


@dataclass
class BoxStats:
    q1: float
    q2: float
    q3: float
    whisker_lo: float
    whisker_hi: float

    @property
    def iqr(self):
        return self.q3 - self.q1


def box_stats(values):
    """Quartiles by linear interpolation between closest ranks; whiskers are the
    most extreme data points within 1.5 IQR of the box."""
    x = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if len(x) == 0:
        raise EvaluationError("box_stats needs at least one value")
    q1, q2, q3 = np.percentile(x, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_lim, hi_lim = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_lim) & (x <= hi_lim)]
    return BoxStats(float(q1), float(q2), float(q3), float(inside.min()), float(inside.max()))


def speed_factor(t_frame_ms, fps):
    """``1 / (t_F f)`` with ``t_F`` in milliseconds."""
    if not (t_frame_ms > 0 and fps > 0):
        raise EvaluationError("t_F and f must be positive")
    return 1000.0 / (t_frame_ms * fps)


def keyframe_ratio(run_log):
    """Keyframes created over frames processed.

    ``run_log`` is either a sequence of per-frame records with a boolean
    ``keyframe`` entry or a ``(n_keyframes, n_frames)`` pair.
    """
    if isinstance(run_log, tuple):
        n_kf, n = run_log
    else:
        recs = [r for r in run_log if "keyframe" in r]
        n = len(recs)
        n_kf = sum(1 for r in recs if r["keyframe"])
    if n < 1:
        raise EvaluationError("no processed frames")
    return n_kf / n


@dataclass
class EvalReport:
    series: ErrorSeries
    stats: BoxStats
    similarity: SimilarityTransform
    t_frame_ms: float = float("nan")
    kf_ratio: float = float("nan")
    kappa: float = float("nan")
    n_pairs: int = 0


def evaluate(G, P, tau=None, planar=False, t_frame_ms=None, fps=None, kf_ratio=None):
    """Synchronise, align, and summarise one estimate against ground truth."""
    g, p = synchronize(G, P, tau)
    S = align_similarity(g, p, planar=planar)
    series = relative_errors(g, apply_similarity(S, p))
    stats = box_stats(series.epsilon)
    kappa = speed_factor(t_frame_ms, fps) if t_frame_ms and fps else float("nan")
    return EvalReport(series, stats, S,
                      float("nan") if t_frame_ms is None else t_frame_ms,
                      float("nan") if kf_ratio is None else kf_ratio, kappa, len(g))


def rotation_angle_deg(R):
    return float(np.degrees(rotation_angle(R)))
