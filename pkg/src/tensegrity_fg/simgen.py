"""Kinematic synthetic data: smooth ground-truth motion and noisy observations.

Bar ``j`` follows ``G(t) * B_j * Exp(xi_j(t))`` where ``G`` is a shared rigid
motion, ``B_j`` the bar's pose in the nominal prism and ``xi_j`` a small shape
deformation. Every curve is a random Chebyshev series of degree at most
``max_degree`` with decaying coefficients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .chebyshev import coeffs_to_values, lie_eval_many, make_basis, VecPoly
from .errors import AlignmentError, GenerationError, InvalidArgumentError
from .factors import (
    BAR_TO_COLOR,
    BARS,
    ENDS,
    CableObservation,
    EndcapObservation,
    FrameObservations,
    RobotGeometry,
)
from .liegroup import Pose3, Rot3, quaternions_to_matrices, se3_log_batch

ENDCAP_ORDER = tuple((b, e) for b in BARS for e in ENDS)


@dataclass(frozen=True)
class SimConfig:
    n_trajectories: int = 25
    duration: float = 30.0
    gt_rate: float = 200.0
    obs_rate: float = 30.0
    endcap_sigma: float = 0.01
    cable_sigma: float = 0.005
    p_miss: float = 0.0
    spurious_per_frame: float = 0.0
    seed: int = 0
    max_degree: int = 8
    region: float = 0.5
    rotation_amplitude: float = 1.0
    deformation_amplitude: float = 0.03
    min_cable: float = 0.05
    max_cable: float = 0.6
    max_speed: float = 2.0
    max_attempts: int = 100
    reference_duration: float = 30.0
    emit_labels: bool = True

    def __post_init__(self):
        if not (self.duration > 0 and self.gt_rate > 0 and self.obs_rate > 0):
            raise InvalidArgumentError("duration and rates must be positive")
        if self.obs_rate > self.gt_rate:
            raise InvalidArgumentError("observation rate cannot exceed the ground-truth rate")
        if not 0.0 <= self.p_miss <= 1.0:
            raise InvalidArgumentError("p_miss must be in [0, 1]")
        if self.endcap_sigma < 0 or self.cable_sigma < 0 or self.spurious_per_frame < 0:
            raise InvalidArgumentError("noise levels and spurious rate must be non-negative")
        if self.n_trajectories < 1 or self.max_degree < 1:
            raise InvalidArgumentError("n_trajectories and max_degree must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidArgumentError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class GroundTruthTrajectory:
    """Poses sampled at the ground-truth rate.

    ``rotations`` has shape ``(n, 3, 4)`` (quaternions per bar), ``translations``
    ``(n, 3, 3)``, ``endcaps`` ``(n, 6, 3)`` in ``ENDCAP_ORDER`` and ``cables``
    ``(n, 9)`` in cable-map order.
    """

    timestamps: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    endcaps: np.ndarray
    cables: np.ndarray
    geometry: RobotGeometry

    def __len__(self):
        return len(self.timestamps)

    def pose(self, i, bar):
        j = BARS.index(bar)
        return Pose3(Rot3(*self.rotations[i, j]), self.translations[i, j])

    def poses(self, i):
        return {b: self.pose(i, b) for b in BARS}

    def to_records(self):
        for i, t in enumerate(self.timestamps):
            yield {
                "t": float(t),
                "poses": {
                    BAR_TO_COLOR[b]: {
                        "quaternion": self.rotations[i, j].tolist(),
                        "translation": self.translations[i, j].tolist(),
                    }
                    for j, b in enumerate(BARS)
                },
            }

    @classmethod
    def from_poses(cls, timestamps, pose_list, geom=None):
        n = len(timestamps)
        rot = np.empty((n, 3, 4))
        tr = np.empty((n, 3, 3))
        for i, poses in enumerate(pose_list):
            for j, b in enumerate(BARS):
                rot[i, j] = poses[b].rotation.quaternion
                tr[i, j] = poses[b].translation
        return cls.from_arrays(timestamps, rot, tr, geom)

    @classmethod
    def from_arrays(cls, timestamps, quaternions, translations, geom=None):
        """Quaternions ``(n, 3, 4)`` must already be unit and canonical."""
        geom = geom or RobotGeometry()
        rot = np.asarray(quaternions, dtype=float)
        tr = np.asarray(translations, dtype=float)
        ends = _endcaps(rot, tr, geom)
        return cls(np.asarray(timestamps, dtype=float), rot, tr, ends, _cables(ends, geom), geom)


def _rotation_matrices(quats):
    w, x, y, z = np.moveaxis(quats, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _endcaps(rot, tr, geom):
    R = _rotation_matrices(rot)
    out = np.empty(rot.shape[:1] + (6, 3))
    for k, (b, e) in enumerate(ENDCAP_ORDER):
        j = BARS.index(b)
        out[:, k] = R[:, j] @ geom.endcap_offset(e) + tr[:, j]
    return out


def _cables(ends, geom):
    idx = {be: k for k, be in enumerate(ENDCAP_ORDER)}
    return np.stack([np.linalg.norm(ends[:, idx[a]] - ends[:, idx[b]], axis=-1) for a, b in geom.cable_map], -1)


def _random_curve(rng, dim, degree, domain, amplitude):
    """Chebyshev series with ``1/(k+1)^2`` coefficient decay, max value ``amplitude``."""
    coeffs = rng.normal(size=(dim, degree + 1)) / (np.arange(degree + 1) + 1.0) ** 2
    coeffs[:, 0] = 0.0
    basis = make_basis(degree, domain)
    vals = coeffs_to_values(coeffs)
    scale = np.max(np.abs(vals))
    return VecPoly(basis, vals * (amplitude / scale if scale > 0 else 0.0))


def generate_trajectory(cfg=None, seed=None, geom=None):
    """Ground truth for one trajectory; ``seed`` overrides ``cfg.seed``."""
    cfg = cfg or SimConfig()
    geom = geom or RobotGeometry()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n = int(math.floor(cfg.duration * cfg.gt_rate + 1e-9)) + 1
    ts = np.arange(n) / cfg.gt_rate
    domain = (0.0, float(ts[-1]) if n > 1 else cfg.duration)
    nominal = geom.nominal_poses()
    centroid = np.mean([p.translation for p in nominal.values()], axis=0)
    base = {b: Pose3(p.rotation, p.translation - centroid) for b, p in nominal.items()}
    # shorter clips get proportionally smaller, lower-degree motion so that
    # typical speeds do not depend on the duration
    frac = min(1.0, cfg.duration / cfg.reference_duration)
    top = max(2, int(round(cfg.max_degree * frac)))
    for _ in range(cfg.max_attempts):
        deg = int(rng.integers(2, top + 1))
        rot_curve = _random_curve(rng, 3, deg, domain, cfg.rotation_amplitude * frac)
        pos_curve = _random_curve(rng, 3, deg, domain, 0.3 * cfg.region * frac)
        heading = Rot3.exp(rng.normal(size=3) * 0.5)
        deform = {b: _random_curve(rng, 6, int(rng.integers(1, top + 1)), domain,
                                   cfg.deformation_amplitude * max(frac, 0.2)) for b in BARS}
        w_all = rot_curve.eval_many(ts)
        p_all = pos_curve.eval_many(ts)
        d_all = {b: deform[b].eval_many(ts) for b in BARS}
        poses = []
        for i in range(n):
            G = Pose3(heading * Rot3.exp(w_all[i]), p_all[i])
            poses.append({b: G * base[b] * Pose3.exp(d_all[b][i]) for b in BARS})
        gt = GroundTruthTrajectory.from_poses(ts, poses, geom)
        if _admissible(gt, cfg):
            return gt
    raise GenerationError(f"no admissible trajectory in {cfg.max_attempts} attempts; try another seed")


def _admissible(gt, cfg):
    c = gt.cables
    if c.min() < cfg.min_cable or c.max() > cfg.max_cable:
        return False
    centres = gt.translations.reshape(-1, 3)
    if np.any(centres.max(axis=0) - centres.min(axis=0) > cfg.region):
        return False
    if len(gt) > 1:
        v = np.linalg.norm(np.diff(gt.endcaps, axis=0), axis=-1) / np.diff(gt.timestamps)[:, None]
        if v.max() >= cfg.max_speed:
            return False
    return True


def max_endcap_speed(gt):
    v = np.linalg.norm(np.diff(gt.endcaps, axis=0), axis=-1) / np.diff(gt.timestamps)[:, None]
    return float(v.max())


def observation_indices(gt, rate):
    """Nearest ground-truth samples to a uniform clock at ``rate``."""
    t0, t1 = gt.timestamps[0], gt.timestamps[-1]
    k = np.arange(int(math.floor((t1 - t0) * rate + 1e-9)) + 1)
    idx = np.searchsorted(gt.timestamps, t0 + k / rate)
    idx = np.clip(idx, 0, len(gt) - 1)
    left = np.clip(idx - 1, 0, len(gt) - 1)
    take_left = np.abs(gt.timestamps[left] - (t0 + k / rate)) <= np.abs(gt.timestamps[idx] - (t0 + k / rate))
    return np.unique(np.where(take_left, left, idx))


def sample_observations(gt, cfg=None, seed=None):
    """Noisy, unlabelled frames at ``cfg.obs_rate``."""
    cfg = cfg or SimConfig()
    rng = np.random.default_rng((cfg.seed if seed is None else seed) + 7919)
    lo = gt.endcaps.reshape(-1, 3).min(axis=0)
    hi = gt.endcaps.reshape(-1, 3).max(axis=0)
    frames = []
    prev_t = None
    for i in observation_indices(gt, cfg.obs_rate):
        t = float(gt.timestamps[i])
        pts = []
        for k, (b, end) in enumerate(ENDCAP_ORDER):
            if rng.random() < cfg.p_miss:
                continue
            pos = gt.endcaps[i, k] + rng.normal(scale=cfg.endcap_sigma, size=3) if cfg.endcap_sigma > 0 else gt.endcaps[i, k].copy()
            pts.append(EndcapObservation(BAR_TO_COLOR[b], pos, None, end if cfg.emit_labels else None))
        n_spur = int(math.floor(cfg.spurious_per_frame))
        if rng.random() < cfg.spurious_per_frame - n_spur:
            n_spur += 1
        for _ in range(n_spur):
            color = BAR_TO_COLOR[BARS[int(rng.integers(3))]]
            pts.append(EndcapObservation(color, rng.uniform(lo, hi)))
        if len(pts) > 1:
            pts = [pts[j] for j in rng.permutation(len(pts))]
        cab = gt.cables[i] + (rng.normal(scale=cfg.cable_sigma, size=9) if cfg.cable_sigma > 0 else 0.0)
        cables = [CableObservation(s, float(max(cab[s], 1e-6))) for s in range(9)]
        frames.append(FrameObservations(t, pts, cables, [], None if prev_t is None else t - prev_t))
        prev_t = t
    return frames


@dataclass
class FitErrorSummary:
    summary: float
    mean_abs_error: np.ndarray
    count: int

    def to_dict(self):
        return {"summary": self.summary, "mean_abs_error": self.mean_abs_error.tolist(), "count": self.count}


def evaluate_fit(gt, traj):
    """Mean componentwise ``|X_gt (-) X_hat|`` over timestamps and bars.

    ``summary`` sums the six averaged components except the bar-frame Z
    rotation, which is unobservable.
    """
    lo, hi = traj.domain
    span = max(1.0, abs(lo), abs(hi))
    if gt.timestamps[0] < lo - 1e-9 * span or gt.timestamps[-1] > hi + 1e-9 * span:
        raise AlignmentError(f"trajectory domain [{lo}, {hi}] does not cover ground truth "
                             f"[{gt.timestamps[0]}, {gt.timestamps[-1]}]")
    ts = np.clip(np.asarray(gt.timestamps, dtype=float), lo, hi)
    total = np.zeros(6)
    for j, b in enumerate(BARS):
        R_hat, t_hat = lie_eval_many(traj.bars[b], ts)
        R_gt = quaternions_to_matrices(gt.rotations[:, j])
        R_hat_t = np.transpose(R_hat, (0, 2, 1))
        rel_t = np.einsum("nij,nj->ni", R_hat_t, gt.translations[:, j] - t_hat)
        total += np.abs(se3_log_batch(R_hat_t @ R_gt, rel_t)).sum(axis=0)
    mean = total / (len(gt) * len(BARS))
    return FitErrorSummary(float(mean.sum() - mean[2]), mean, len(gt))
