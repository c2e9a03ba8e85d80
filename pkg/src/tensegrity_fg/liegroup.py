"""SO(3) and SE(3) for bar poses and endcap correspondence rotations.

Conventions
-----------
* Quaternions are stored as ``(w, x, y, z)`` with ``w >= 0``. When ``w == 0``
  the first nonzero of ``x, y, z`` is made positive.
* Tangent vectors of SE(3) are ``[omega, rho]``: rotation first (rad), then
  translation (m).
* Perturbations are on the right: ``q (+) d = q * Exp(d)`` and
  ``q2 (-) q1 = Log(q1^-1 * q2)``.
* SE(3) uses the full exponential, so the translational part of a twist is
  coupled to the rotation through the ``V`` matrix.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError

SMALL_ANGLE = 1e-6
DEGENERATE_LOG_MARGIN = 1e-7
# below this the cancelling closed forms lose digits; use Taylor series
SERIES_ANGLE = 1e-2


def skew(v):
    return np.array(
        [[0.0, -v[2], v[1]],
         [v[2], 0.0, -v[0]],
         [-v[1], v[0], 0.0]]
    )


def _readonly(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


class Rot3:
    """Unit quaternion rotation."""

    __slots__ = ("_q", "_m")

    def __init__(self, w=1.0, x=0.0, y=0.0, z=0.0, *, _matrix=None):
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if not math.isfinite(n) or n == 0.0:
            raise InvalidArgumentError(f"cannot build a rotation from quaternion {(w, x, y, z)}")
        w, x, y, z = w / n, x / n, y / n, z / n
        if w < 0.0 or (w == 0.0 and _first_nonzero_negative(x, y, z)):
            w, x, y, z = -w, -x, -y, -z
        self._q = (w, x, y, z)
        self._m = _matrix

    # construction -----------------------------------------------------------

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(*q)

    @classmethod
    def exp(cls, omega):
        wx, wy, wz = (float(c) for c in omega)
        if not all(map(math.isfinite, (wx, wy, wz))):
            raise InvalidArgumentError("rotation vector must be finite")
        theta = math.sqrt(wx * wx + wy * wy + wz * wz)
        if theta < SMALL_ANGLE:
            s = 0.5 - theta * theta / 48.0
            c = 1.0 - theta * theta / 8.0
        else:
            s = math.sin(0.5 * theta) / theta
            c = math.cos(0.5 * theta)
        return cls(c, s * wx, s * wy, s * wz)

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=float)
        return cls.exp(axis / np.linalg.norm(axis) * angle)

    # accessors --------------------------------------------------------------

    @property
    def quaternion(self):
        return self._q

    @property
    def w(self):
        return self._q[0]

    @property
    def matrix(self):
        if self._m is None:
            w, x, y, z = self._q
            self._m = _readonly(
                [[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                 [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                 [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]]
            )
        return self._m

    @property
    def angle(self):
        w, x, y, z = self._q
        return 2.0 * math.atan2(math.sqrt(x * x + y * y + z * z), w)

    # group operations -------------------------------------------------------

    def compose(self, other):
        aw, ax, ay, az = self._q
        bw, bx, by, bz = other._q
        return Rot3(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )

    __mul__ = compose

    def inverse(self):
        w, x, y, z = self._q
        return Rot3(w, -x, -y, -z)

    def rotate(self, v):
        return self.matrix @ np.asarray(v, dtype=float)

    def log(self):
        """Principal rotation vector, norm in ``[0, pi]``."""
        w, x, y, z = self._q
        s = math.sqrt(x * x + y * y + z * z)
        if s < SMALL_ANGLE:
            # w ~ 1 here; 2*atan2(s, w)/s ~ (2/w)(1 - s^2/(3 w^2))
            k = 2.0 / w * (1.0 - s * s / (3.0 * w * w))
        else:
            k = 2.0 * math.atan2(s, w) / s
        return np.array([k * x, k * y, k * z])

    @property
    def log_is_degenerate(self):
        """True when the angle is within ``1e-7`` of pi and the log axis sign is arbitrary."""
        return self.angle > math.pi - DEGENERATE_LOG_MARGIN

    def oplus(self, d):
        return self.compose(Rot3.exp(d))

    def ominus(self, other):
        return other.inverse().compose(self).log()

    def between(self, other):
        return self.inverse().compose(other)

    def is_close(self, other, tol=1e-9):
        return float(np.linalg.norm(self.ominus(other))) < tol

    def __repr__(self):
        w, x, y, z = self._q
        return f"Rot3(w={w:.6g}, x={x:.6g}, y={y:.6g}, z={z:.6g})"


def _first_nonzero_negative(x, y, z):
    for c in (x, y, z):
        if c != 0.0:
            return c < 0.0
    return False


def _so3_v(omega):
    """Return ``(V, theta)`` for the SE(3) exponential."""
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - math.cos(theta)) / (theta * theta)
        b = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) + a * W + b * (W @ W), theta


def _so3_v_inv(omega):
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    return np.eye(3) - 0.5 * W + c * (W @ W)


class Pose3:
    """Rigid transform ``x -> R x + t``."""

    __slots__ = ("_rot", "_t")

    def __init__(self, rotation=None, translation=(0.0, 0.0, 0.0)):
        self._rot = Rot3.identity() if rotation is None else rotation
        t = np.array(translation, dtype=float).reshape(3)
        t.flags.writeable = False
        self._t = t

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(Rot3.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(6)
        if not np.all(np.isfinite(xi)):
            raise InvalidArgumentError("twist must be finite")
        omega, rho = xi[:3], xi[3:]
        V, _ = _so3_v(omega)
        return cls(Rot3.exp(omega), V @ rho)

    @property
    def rotation(self):
        return self._rot

    @property
    def translation(self):
        return self._t

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self._rot.matrix
        m[:3, 3] = self._t
        return m

    def compose(self, other):
        return Pose3(self._rot * other._rot, self._rot.matrix @ other._t + self._t)

    __mul__ = compose

    def inverse(self):
        rinv = self._rot.inverse()
        return Pose3(rinv, -(rinv.matrix @ self._t))

    def transform_point(self, x):
        return self._rot.matrix @ np.asarray(x, dtype=float) + self._t

    def transform_to(self, x):
        """Express world point ``x`` in this pose's frame."""
        return self._rot.matrix.T @ (np.asarray(x, dtype=float) - self._t)

    def log(self):
        omega = self._rot.log()
        return np.concatenate([omega, _so3_v_inv(omega) @ self._t])

    @property
    def log_is_degenerate(self):
        return self._rot.log_is_degenerate

    def oplus(self, d):
        return self.compose(Pose3.exp(d))

    def ominus(self, other):
        return other.inverse().compose(self).log()

    def between(self, other):
        return self.inverse().compose(other)

    def adjoint(self):
        """Adjoint for ``[omega, rho]`` twists."""
        R = self._rot.matrix
        ad = np.zeros((6, 6))
        ad[:3, :3] = R
        ad[3:, 3:] = R
        ad[3:, :3] = skew(self._t) @ R
        return ad

    def is_close(self, other, tol=1e-9):
        return float(np.linalg.norm(self.ominus(other))) < tol

    def __repr__(self):
        t = self._t
        return f"Pose3({self._rot!r}, t=[{t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}])"


# module-level API ------------------------------------------------------------

def exp(v):
    """Exponential map: 6-vector -> Pose3, 3-vector -> Rot3."""
    v = np.asarray(v, dtype=float)
    if v.shape == (3,):
        return Rot3.exp(v)
    if v.shape == (6,):
        return Pose3.exp(v)
    raise InvalidArgumentError(f"tangent vector must have 3 or 6 entries, got shape {v.shape}")


def log(p):
    return p.log()


def oplus(q, d):
    return q.oplus(d)


def ominus(q2, q1):
    return q2.ominus(q1)


def between(a, b):
    return a.between(b)


def compose(a, b):
    return a.compose(b)


def inverse(a):
    return a.inverse()


def transform_point(p, x):
    return p.transform_point(x)


def so3_right_jacobian_inv(omega):
    """``Jr^-1`` such that ``Log(Exp(w) Exp(d)) ~ w + Jr^-1(w) d``."""
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    elif math.pi - theta < SMALL_ANGLE:
        c = 1.0 / (theta * theta)
    else:
        c = 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * W + c * (W @ W)


def _so3_left_jacobian(omega):
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - math.cos(theta)) / (theta * theta)
        b = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) + a * W + b * (W @ W)


def _se3_q(omega, rho):
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    P = skew(rho)
    WP, PW = W @ P, P @ W
    WPW = WP @ W
    if theta < 1e-2:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta ** 3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta ** 4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta ** 5)
    return (0.5 * P + c1 * (WP + PW + WPW)
            + c2 * (W @ WP + PW @ W - 3.0 * WPW)
            + c3 * (WPW @ W + W @ WPW))


def se3_right_jacobian_inv(xi):
    """``Jr^-1`` for ``[omega, rho]`` twists (closed form, exact)."""
    xi = np.asarray(xi, dtype=float)
    # Jr(xi) = Jl(-xi)
    omega, rho = -xi[:3], -xi[3:]
    Jinv = np.linalg.inv(_so3_left_jacobian(omega))
    Q = _se3_q(omega, rho)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


# Bar endcap constants: half-length offset along the bar's Z axis and the
# 180 degree flip about Y that maps endcap A onto endcap B.
P_OFF = _readonly([0.0, 0.0, 0.1625])
R_OFF = Rot3(0.0, 0.0, 1.0, 0.0)


# batched matrix forms, used where thousands of poses are evaluated at once

def _skew_batch(w):
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    return K


def _exp_coeffs(theta):
    small = theta < SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def se3_exp_batch(xi):
    """Rotation matrices ``(n, 3, 3)`` and translations ``(n, 3)`` of ``Exp(xi)``."""
    xi = np.asarray(xi, dtype=float)
    w, rho = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(w, axis=1)
    a, b, c = _exp_coeffs(theta)
    K = _skew_batch(w)
    K2 = K @ K
    eye = np.eye(3)
    R = eye + a[:, None, None] * K + b[:, None, None] * K2
    V = eye + b[:, None, None] * K + c[:, None, None] * K2
    return R, np.einsum("nij,nj->ni", V, rho)


def se3_log_batch(R, t):
    """Twists ``(n, 6)`` of poses given as rotation matrices and translations."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    cos = (np.trace(R, axis1=1, axis2=2) - 1.0) * 0.5
    vee = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    # atan2 keeps full precision at small angles where arccos does not
    theta = np.arctan2(0.5 * np.linalg.norm(vee, axis=1), cos)
    small = theta < SERIES_ANGLE
    s = np.where(small, 1.0, np.sin(theta))
    scale = np.where(small, 0.5 + theta * theta / 12.0 + 7.0 * theta ** 4 / 720.0, theta / (2.0 * s))
    w = scale[:, None] * vee
    near_pi = theta > math.pi - 1e-3
    for i in np.flatnonzero(near_pi):
        w[i] = Rot3.from_matrix(R[i]).log()
    theta = np.linalg.norm(w, axis=1)
    small = theta < SERIES_ANGLE
    K = _skew_batch(w)
    th = np.where(small, 1.0, theta)
    half = th * 0.5
    d = np.where(small, 1.0 / 12.0 + theta * theta / 720.0 + theta ** 4 / 30240.0,
                 (1.0 - half * np.cos(half) / np.where(small, 1.0, np.sin(half))) / (th * th))
    Vinv = np.eye(3) - 0.5 * K + d[:, None, None] * (K @ K)
    return np.concatenate([w, np.einsum("nij,nj->ni", Vinv, t)], axis=1)


def quaternions_to_matrices(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)
