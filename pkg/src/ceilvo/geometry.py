"""Rigid-body math on SE(3) and the pinhole projection pair.

Twists are ordered ``(rho, omega)``: translational part first, rotational
part second.  Increments are applied on the left, ``T <- exp(xi) @ T``.
"""
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
# below this angle the cubic V-matrix coefficients switch to their series
_SERIES_ANGLE = 1e-3


class GeometryError(ValueError):
    pass


class PointBehindCamera(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


def hat(w):
    """Skew-symmetric matrix of a 3-vector."""
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def _reorthonormalize(R, tol=1e-12):
    # long chains of compositions let round-off leave SO(3); snap back to the
    # nearest rotation once the drift is measurable
    E = R @ R.T
    E[0, 0] -= 1.0
    E[1, 1] -= 1.0
    E[2, 2] -= 1.0
    if not np.abs(E).max() > tol or not np.all(np.isfinite(R)):
        return R
    U, _, Vt = np.linalg.svd(R)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] = -U[:, -1]
    return U @ Vt


class Pose:
    """Element of SE(3) stored as a rotation matrix and a translation."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.array(R, dtype=np.float64).reshape(3, 3)
        self.t = np.zeros(3) if t is None else np.array(t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self):
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(_reorthonormalize(self.R @ other.R), self.R @ other.t + self.t)
        return self.apply(other)

    def apply(self, X):
        """Transform points, shape ``(3,)`` or ``(N, 3)``."""
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def copy(self):
        return Pose(self.R.copy(), self.t.copy())

    def is_valid(self, tol=1e-9):
        return (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t))
                and np.abs(self.R.T @ self.R - np.eye(3)).max() < tol
                and abs(np.linalg.det(self.R) - 1.0) < tol)

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.R, other.R, atol=atol, rtol=0)
                and np.allclose(self.t, other.t, atol=atol, rtol=0))

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def _rotation_coeffs(theta):
    """Return ``(A, B, C)`` with R = I + A W + B W^2 and V = I + B W + C W^2."""
    if theta < SMALL_ANGLE:
        return 1.0, 0.5, 1.0 / 6.0
    t2 = theta * theta
    A = np.sin(theta) / theta
    B = 2.0 * np.sin(0.5 * theta) ** 2 / t2
    if theta < _SERIES_ANGLE:
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        C = (theta - np.sin(theta)) / (t2 * theta)
    return A, B, C


def so3_exp(w):
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    A, B, _ = _rotation_coeffs(theta)
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R):
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * vee(R - R.T)
    sin_t = float(np.linalg.norm(s))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(sin_t, cos_t))
    if theta < SMALL_ANGLE:
        return s
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ s < 0:
            axis = -axis
        return theta * axis
    return s * (theta / sin_t)


def exp(xi):
    """Exponential map se(3) -> SE(3) for a ``(rho, omega)`` twist."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    W = hat(w)
    W2 = W @ W
    A, B, C = _rotation_coeffs(theta)
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return Pose(R, V @ rho)


def log(T):
    """Logarithm SE(3) -> se(3); inverse of :func:`exp` for rotation angles below pi."""
    w = so3_log(T.R)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < _SERIES_ANGLE:
        D = 1.0 / 12.0 + theta * theta / 720.0
    else:
        D = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / (theta * theta)
    Vinv = np.eye(3) - 0.5 * W + D * (W @ W)
    return np.concatenate([Vinv @ T.t, w])


def left_oplus(xi, T):
    """``exp(xi) @ T``."""
    return exp(xi) @ T


def relative_transform(Ti, Tj):
    """``Tj @ Ti^-1``, so that ``relative_transform(Ti, Tj) @ Ti == Tj``."""
    return Tj @ Ti.inverse()


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.linalg.norm(so3_log(R)))


def adjoint(T):
    """6x6 adjoint of ``T`` for ``(rho, omega)`` twists: ``T exp(xi) T^-1 = exp(Ad xi)``."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = T.R
    Ad[3:, 3:] = T.R
    Ad[:3, 3:] = hat(T.t) @ T.R
    return Ad


def quat_to_rot(q):
    """Rotation matrix from a quaternion ``(qx, qy, qz, qw)``."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def yaw_rotation(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def diagonal(self):
        return float(np.hypot(self.width, self.height))

    def vector(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def with_vector(self, k):
        return Intrinsics(float(k[0]), float(k[1]), float(k[2]), float(k[3]), self.width, self.height)

    def at_level(self, level):
        """Intrinsics for pyramid level ``level`` of a 2x2 box pyramid.

        Pixel centres sit at integer coordinates, so the principal point maps as
        ``(c + 0.5) / 2^l - 0.5``.
        """
        if level == 0:
            return self
        s = 0.5 ** level
        return Intrinsics(self.fx * s, self.fy * s, (self.cx + 0.5) * s - 0.5,
                          (self.cy + 0.5) * s - 0.5, self.width >> level, self.height >> level)


def project(K, X):
    """Pinhole projection of a camera-frame point to pixel coordinates."""
    X = np.asarray(X, dtype=np.float64)
    if not X[2] > 0:
        raise PointBehindCamera(f"point has z = {X[2]}")
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def back_project(K, p, d):
    """Camera-frame point seen at pixel ``p`` with inverse depth ``d``."""
    if not d > 0:
        raise NonPositiveDepth(f"inverse depth must be positive, got {d}")
    return np.array([(p[0] - K.cx) / K.fx, (p[1] - K.cy) / K.fy, 1.0]) / d


def project_many(K, X):
    """Vectorised projection; returns ``(uv, z)`` without raising on ``z <= 0``."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    zs = np.where(z > 0, z, 1.0)
    u = K.fx * X[..., 0] / zs + K.cx
    v = K.fy * X[..., 1] / zs + K.cy
    return np.stack([u, v], axis=-1), z


def back_project_many(K, uv, d):
    uv = np.asarray(uv, dtype=np.float64)
    q = np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy,
                  np.ones(uv.shape[:-1])], axis=-1)
    return q / np.asarray(d, dtype=np.float64)[..., None]
