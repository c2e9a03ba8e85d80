"""Measurement models of the 3-bar tensegrity and the per-frame factor graph.

Each bar ``j`` has a centre pose ``X^j`` whose local Z axis runs along the bar.
An endcap sits at ``X^j (R p_off)`` where ``R`` is one of two correspondence
rotations ``R^{jA}``, ``R^{jB}``; three rotation factors pull the pair onto
``{(I, R_off), (R_off, I)}`` so the optimiser can decide which physical end
an observation belongs to.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GraphEmptyError, InvalidArgumentError
from .liegroup import (
    P_OFF,
    R_OFF,
    Pose3,
    Rot3,
    se3_right_jacobian_inv,
    skew,
    so3_right_jacobian_inv,
)
from .solver import Factor, NoiseModel, Values, VariableKey, optimize

BARS = ("R", "G", "B")
ENDS = ("A", "B")
COLOR_TO_BAR = {"red": "R", "green": "G", "blue": "B", "R": "R", "G": "G", "B": "B"}
BAR_TO_COLOR = {"R": "red", "G": "green", "B": "blue"}

# Endcap A of every bar on the bottom triangle, B on the top one (3-bar prism).
# Six triangle edges are the short cables; the three long ones join each
# bottom endcap to the top endcap of the previous bar.
DEFAULT_CABLE_MAP = (
    (("R", "A"), ("G", "A")),
    (("G", "A"), ("B", "A")),
    (("B", "A"), ("R", "A")),
    (("R", "B"), ("G", "B")),
    (("G", "B"), ("B", "B")),
    (("B", "B"), ("R", "B")),
    (("R", "A"), ("B", "B")),
    (("G", "A"), ("R", "B")),
    (("B", "A"), ("G", "B")),
)


@dataclass(frozen=True)
class RobotGeometry:
    p_off: np.ndarray = field(default_factory=lambda: P_OFF.copy())
    r_off: Rot3 = R_OFF
    cable_map: tuple = DEFAULT_CABLE_MAP
    bar_colors: tuple = BARS
    black_segment: bool = False

    def __post_init__(self):
        p = np.array(self.p_off, dtype=float).reshape(3)
        if not np.linalg.norm(p) > 0:
            raise InvalidArgumentError("p_off must be nonzero")
        p.flags.writeable = False
        object.__setattr__(self, "p_off", p)
        if not (self.r_off * self.r_off).is_close(Rot3.identity(), 1e-9):
            raise InvalidArgumentError("r_off must be an involution")
        cm = tuple((tuple(a), tuple(b)) for a, b in self.cable_map)
        pairs = {frozenset((a, b)) for a, b in cm}
        if len(cm) != 9 or len(pairs) != 9:
            raise InvalidArgumentError("cable_map needs 9 unique endcap pairs")
        ends = {e for a, b in cm for e in (a, b)}
        if ends != {(b, e) for b in self.bar_colors for e in ENDS}:
            raise InvalidArgumentError("cable_map must span all six endcaps")
        object.__setattr__(self, "cable_map", cm)

    @property
    def half_length(self):
        return float(np.linalg.norm(self.p_off))

    @property
    def bar_length(self):
        return 2.0 * self.half_length

    def endcap_offset(self, end):
        return self.p_off if end == "A" else self.r_off.rotate(self.p_off)

    def endcap_position(self, pose, end):
        return pose.transform_point(self.endcap_offset(end))

    def nominal_poses(self):
        """Upright prism with the default cable layout; used only to seed solves."""
        L = self.bar_length
        r = 0.1 * L / 0.325
        twist = 5.0 * math.pi / 6.0
        horiz = 2.0 * r * math.sin(0.5 * twist)
        H = math.sqrt(max(L * L - horiz * horiz, 1e-12))
        out = {}
        for i, bar in enumerate(self.bar_colors):
            th = 2.0 * math.pi * i / 3.0
            a = np.array([r * math.cos(th), r * math.sin(th), 0.0])
            b = np.array([r * math.cos(th + twist), r * math.sin(th + twist), H])
            out[bar] = pose_from_endcaps(a, b)
        return out

    def to_dict(self):
        return {
            "p_off": self.p_off.tolist(),
            "r_off": list(self.r_off.quaternion),
            "cable_map": [[list(a), list(b)] for a, b in self.cable_map],
            "black_segment": self.black_segment,
        }

    @classmethod
    def from_dict(cls, d):
        kw = {}
        if "p_off" in d:
            kw["p_off"] = d["p_off"]
        elif "half_length" in d:
            kw["p_off"] = [0.0, 0.0, float(d["half_length"])]
        if "r_off" in d:
            kw["r_off"] = Rot3(*d["r_off"])
        if "cable_map" in d:
            kw["cable_map"] = tuple((tuple(a), tuple(b)) for a, b in d["cable_map"])
        if "black_segment" in d:
            kw["black_segment"] = bool(d["black_segment"])
        return cls(**kw)


@dataclass(frozen=True)
class NoiseConfig:
    endcap_sigma: float = 0.01
    cable_sigma: float = 0.005
    rotation_sigma: float = 1e-3
    black_sigma: float = 0.02

    def to_dict(self):
        return {k: getattr(self, k) for k in ("endcap_sigma", "cable_sigma", "rotation_sigma", "black_sigma")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def load_config(path):
    """Read ``{"geometry": {...}, "noise": {...}}``; missing entries take defaults."""
    with open(path) as fh:
        d = json.load(fh)
    return RobotGeometry.from_dict(d.get("geometry", {})), NoiseConfig.from_dict(d.get("noise", {}))


def dump_config(geom, noise):
    return {"geometry": geom.to_dict(), "noise": noise.to_dict()}


def pose_from_endcaps(a, b, roll_ref=None):
    """Bar pose with centre at the midpoint and +Z pointing from ``b`` to ``a``.

    The rotation is the minimal one taking ``roll_ref``'s Z axis (identity if
    omitted) onto the bar axis.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axis = a - b
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise InvalidArgumentError("endcaps coincide; bar axis undefined")
    axis /= n
    base = Rot3.identity() if roll_ref is None else roll_ref
    return Pose3(minimal_rotation(base.matrix[:, 2], axis) * base, 0.5 * (a + b))


def minimal_rotation(u, v):
    """Smallest rotation taking unit vector ``u`` onto unit vector ``v``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    c = float(u @ v)
    w = np.cross(u, v)
    if c < -1.0 + 1e-12:
        # antiparallel: any perpendicular axis
        perp = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(u, [0.0, 1.0, 0.0])
        perp /= np.linalg.norm(perp)
        return Rot3(0.0, *perp)
    return Rot3(1.0 + c, *w)


# residuals ------------------------------------------------------------------

def endcap_model(X, R, geom=None):
    p = P_OFF if geom is None else geom.p_off
    return X.rotation.matrix @ (R.matrix @ p) + X.translation


def endcap_residual(X, R, z, geom=None):
    return endcap_model(X, R, geom) - np.asarray(z, dtype=float)


def cable_residual(Xj, Rj, Xk, Rk, z, geom=None):
    d = endcap_model(Xj, Rj, geom) - endcap_model(Xk, Rk, geom)
    return np.array([np.linalg.norm(d) - float(z)])


def between_residual(X_now, X_prev):
    return X_now.between(X_prev).log()


def bar_black_residual(XR, XG, XB, z, geom=None):
    r, _ = _bar_black(XR, XG, XB, z, geom)
    return r


def _bar_black(XR, XG, XB, z, geom):
    z = np.asarray(z, dtype=float)
    best = None
    for idx, X in enumerate((XR, XG, XB)):
        q = X.rotation.matrix.T @ (z - X.translation)
        n = math.hypot(q[0], q[1])
        if best is None or n < best[0]:
            best = (n, idx, q)
    _, idx, q = best
    if geom is not None and geom.black_segment:
        over = abs(q[2]) - geom.half_length
        return np.array([q[0], q[1], math.copysign(max(over, 0.0), q[2])]), (idx, q)
    return q[:2].copy(), (idx, q)


def r0_residual(RA, RB, geom=None):
    roff = R_OFF if geom is None else geom.r_off
    return (RA * RB).ominus(roff)


def r1_residual(RB, RA, geom=None):
    roff = R_OFF if geom is None else geom.r_off
    return (RB * RA).ominus(roff)


def r2_residual(RA, RB, geom=None):
    roff = R_OFF if geom is None else geom.r_off
    return RA.ominus(RB * roff)


# factors --------------------------------------------------------------------

def _endcap_jac(X, R, p):
    RX = X.rotation.matrix
    Rr = R.matrix
    y = Rr @ p
    e = RX @ y + X.translation
    JX = np.empty((3, 6))
    JX[:, :3] = -RX @ skew(y)
    JX[:, 3:] = RX
    JR = -(RX @ Rr) @ skew(p)
    return e, JX, JR


def _noise(sigma, cov, dim):
    if cov is None:
        return NoiseModel.isotropic(dim, sigma)
    c = np.asarray(cov, dtype=float)
    if c.ndim == 0:
        return NoiseModel.isotropic(dim, math.sqrt(float(c)))
    return NoiseModel.gaussian(c)


class EndcapFactor(Factor):
    analytic = True

    def __init__(self, key_x, key_r, z, geom, noise):
        super().__init__([key_x, key_r], noise, "endcap")
        self.z = np.asarray(z, dtype=float)
        self.geom = geom

    def evaluate(self, X, R):
        return endcap_residual(X, R, self.z, self.geom)

    def evaluate_jacobians(self, X, R):
        e, JX, JR = _endcap_jac(X, R, self.geom.p_off)
        return e - self.z, [JX, JR]


class CableFactor(Factor):
    analytic = True
    min_separation = 1e-9

    def __init__(self, key_xj, key_rj, key_xk, key_rk, z, geom, noise, sensor_id=None):
        super().__init__([key_xj, key_rj, key_xk, key_rk], noise, "cable")
        if not z >= 0:
            raise InvalidArgumentError(f"cable length must be non-negative, got {z!r}")
        self.z = float(z)
        self.geom = geom
        self.sensor_id = sensor_id

    def evaluate(self, Xj, Rj, Xk, Rk):
        return cable_residual(Xj, Rj, Xk, Rk, self.z, self.geom)

    def evaluate_jacobians(self, Xj, Rj, Xk, Rk):
        p = self.geom.p_off
        ej, JXj, JRj = _endcap_jac(Xj, Rj, p)
        ek, JXk, JRk = _endcap_jac(Xk, Rk, p)
        d = ej - ek
        n = float(np.linalg.norm(d))
        u = d / n if n > self.min_separation else np.array([1.0, 0.0, 0.0])
        u = u[None, :]
        return np.array([n - self.z]), [u @ JXj, u @ JRj, -(u @ JXk), -(u @ JRk)]


class BetweenFactor(Factor):
    """``Log(X_now^-1 X_prev)`` with covariance ``dt * I``.

    ``prev`` is either a variable key or a fixed ``Pose3`` (the previous
    frame's estimate when filtering).
    """

    analytic = True

    def __init__(self, key_now, prev, dt):
        if not dt > 0:
            raise InvalidArgumentError(f"z_dt must be positive, got {dt!r}")
        self.dt = float(dt)
        self.fixed_prev = prev if isinstance(prev, Pose3) else None
        keys = [key_now] if self.fixed_prev is not None else [key_now, prev]
        super().__init__(keys, NoiseModel.isotropic(6, math.sqrt(self.dt)), "between")

    def evaluate(self, X_now, X_prev=None):
        return between_residual(X_now, self.fixed_prev if X_prev is None else X_prev)

    def evaluate_jacobians(self, X_now, X_prev=None):
        prev = self.fixed_prev if X_prev is None else X_prev
        E = X_now.between(prev)
        r = E.log()
        Jinv = se3_right_jacobian_inv(r)
        J_now = -Jinv @ E.inverse().adjoint()
        if X_prev is None:
            return r, [J_now]
        return r, [J_now, Jinv]


class BarBlackFactor(Factor):
    analytic = True

    def __init__(self, keys_xyz, z, geom, noise):
        super().__init__(list(keys_xyz), noise, "bar")
        self.z = np.asarray(z, dtype=float)
        self.geom = geom

    def evaluate(self, XR, XG, XB):
        return bar_black_residual(XR, XG, XB, self.z, self.geom)

    def evaluate_jacobians(self, XR, XG, XB):
        r, (idx, q) = _bar_black(XR, XG, XB, self.z, self.geom)
        Jq = np.empty((3, 6))
        Jq[:, :3] = skew(q)
        Jq[:, 3:] = -np.eye(3)
        if r.size == 3:
            Jr = Jq.copy()
            Jr[2] = Jq[2] * (1.0 if abs(q[2]) > self.geom.half_length else 0.0)
        else:
            Jr = Jq[:2]
        Js = [np.zeros((r.size, 6)) for _ in range(3)]
        Js[idx] = Jr
        return r, Js


class RotationConstraintFactor(Factor):
    """One of the three correspondence constraints; keys are always ``(R^A, R^B)``."""

    analytic = True

    def __init__(self, which, key_a, key_b, geom, noise):
        if which not in (0, 1, 2):
            raise InvalidArgumentError("which must be 0, 1 or 2")
        super().__init__([key_a, key_b], noise, f"R{which}")
        self.which = which
        self.geom = geom

    def evaluate(self, RA, RB):
        if self.which == 0:
            return r0_residual(RA, RB, self.geom)
        if self.which == 1:
            return r1_residual(RB, RA, self.geom)
        return r2_residual(RA, RB, self.geom)

    def evaluate_jacobians(self, RA, RB):
        r = self.evaluate(RA, RB)
        Jinv = so3_right_jacobian_inv(r)
        if self.which == 0:
            return r, [Jinv @ RB.matrix.T, Jinv]
        if self.which == 1:
            return r, [Jinv, Jinv @ RA.matrix.T]
        return r, [Jinv, -Jinv @ (RA.matrix.T @ RB.matrix)]


# observations and graph construction ------------------------------------------

@dataclass(frozen=True)
class EndcapObservation:
    color: str
    position: np.ndarray
    covariance: Optional[np.ndarray] = None
    label: Optional[str] = None

    @property
    def bar(self):
        return COLOR_TO_BAR[self.color]


@dataclass(frozen=True)
class CableObservation:
    sensor_id: int
    length: float
    variance: Optional[float] = None


@dataclass(frozen=True)
class BarPointObservation:
    position: np.ndarray
    covariance: Optional[np.ndarray] = None


@dataclass
class FrameObservations:
    timestamp: float
    endcap_points: list = field(default_factory=list)
    cable_lengths: list = field(default_factory=list)
    bar_points: list = field(default_factory=list)
    dt_since_prev: Optional[float] = None

    def counts(self):
        return len(self.endcap_points), len(self.cable_lengths), len(self.bar_points)

    @property
    def empty(self):
        return not (self.endcap_points or self.cable_lengths or self.bar_points)


def pose_key(bar, index=0):
    return VariableKey("X", bar, "", index)


def rot_key(bar, end, index=0):
    return VariableKey("R", bar, end, index)


def assign_labels(endcap_points):
    """Give unlabelled endcap observations A/B labels in order of appearance per bar."""
    used = {}
    out = []
    for e in endcap_points:
        bar = e.bar
        taken = used.setdefault(bar, set())
        label = e.label
        if label is None:
            free = [x for x in ENDS if x not in taken]
            if not free:
                raise InvalidArgumentError(f"more than two endcap observations for bar {bar}")
            label = free[0]
        elif label in taken:
            raise InvalidArgumentError(f"endcap {bar}{label} observed twice")
        taken.add(label)
        out.append((e, label))
    return out


def build_frame_graph(obs, prev=None, geom=None, noise_config=None, initial=None, index=0):
    """Factors and initial values for one sensing instant.

    ``prev`` maps bar -> ``Pose3`` from the previous estimate; when given, a
    between factor per bar is added with ``z_dt = obs.dt_since_prev``.
    ``initial`` (bar -> ``Pose3``) overrides the pose seed.
    """
    geom = geom or RobotGeometry()
    nc = noise_config or NoiseConfig()
    if obs.empty:
        raise GraphEmptyError(f"frame at t={obs.timestamp} has no observations")
    factors = []
    touched = set()
    for e, label in assign_labels(obs.endcap_points):
        bar = e.bar
        touched.add(bar)
        factors.append(EndcapFactor(pose_key(bar, index), rot_key(bar, label, index), e.position, geom,
                                    _noise(nc.endcap_sigma, e.covariance, 3)))
    seen = set()
    for c in obs.cable_lengths:
        sid = int(c.sensor_id)
        if sid in seen or not 0 <= sid < len(geom.cable_map):
            raise InvalidArgumentError(f"invalid or duplicate cable sensor id {sid}")
        seen.add(sid)
        (bj, ej), (bk, ek) = geom.cable_map[sid]
        touched.update((bj, bk))
        noise = _noise(nc.cable_sigma, None if c.variance is None else np.array(c.variance), 1)
        factors.append(CableFactor(pose_key(bj, index), rot_key(bj, ej, index), pose_key(bk, index),
                                   rot_key(bk, ek, index), c.length, geom, noise, sensor_id=sid))
    rot_noise = NoiseModel.isotropic(3, nc.rotation_sigma)
    for bar in BARS:
        if bar in touched:
            ka, kb = rot_key(bar, "A", index), rot_key(bar, "B", index)
            for which in (0, 1, 2):
                factors.append(RotationConstraintFactor(which, ka, kb, geom, rot_noise))
    if prev is not None:
        dt = obs.dt_since_prev
        if dt is None:
            raise InvalidArgumentError("dt_since_prev is required when a previous estimate is given")
        for bar in BARS:
            factors.append(BetweenFactor(pose_key(bar, index), prev[bar], dt))
    keys3 = [pose_key(b, index) for b in BARS]
    for bp in obs.bar_points:
        factors.append(BarBlackFactor(keys3, bp.position, geom,
                                      _noise(nc.black_sigma, bp.covariance, 3 if geom.black_segment else 2)))

    if initial is not None:
        seed = initial
    elif prev is not None:
        seed = prev
    else:
        from .estimator import initialize_first_frame
        from .errors import InitializationError
        try:
            seed = initialize_first_frame(obs, geom)
        except InitializationError:
            seed = _nominal_seed(obs, geom)
    values = Values()
    for bar in BARS:
        values[pose_key(bar, index)] = seed[bar] if bar in seed else seed[pose_key(bar)]
        if bar in touched:
            values[rot_key(bar, "A", index)] = Rot3.identity()
            values[rot_key(bar, "B", index)] = geom.r_off
    return factors, values


_LOCAL_FACTORS = ("endcap", "R0", "R1", "R2")


def solve_frame_graph(factors, values, lm=None, staged=True):
    """Optimise a frame graph, optionally settling endcap correspondences first.

    A bar whose rotation variables start in the wrong assignment has to turn
    by half a revolution. With cables attached that swing can stall in a
    twisted local minimum, so the staged solve first fits each bar to its own
    endcaps (bars are independent there) and only then adds every factor.
    """
    if staged:
        first = [f for f in factors if f.name in _LOCAL_FACTORS]
        if first and len(first) < len(factors):
            keys = {k for f in first for k in f.keys}
            settled, _ = optimize(first, Values({k: v for k, v in values.items() if k in keys}), lm)
            values = Values({k: settled[k] if k in keys else v for k, v in values.items()})
    return optimize(factors, values, lm)


def _nominal_seed(obs, geom):
    poses = geom.nominal_poses()
    pts = [e.position for e in obs.endcap_points]
    if not pts:
        return poses
    shift = np.mean(pts, axis=0) - np.mean([p.translation for p in poses.values()], axis=0)
    return {b: Pose3(p.rotation, p.translation + shift) for b, p in poses.items()}
