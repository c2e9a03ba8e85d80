"""JSONL frame and ground-truth formats, and trajectory error metrics.

Frame record, one JSON object per line::

    {"t": 0.0,
     "endcaps": [{"color": "red", "xyz": [x, y, z], "cov": [[...]], "label": "A"}],
     "cables": [{"sensor_id": 0, "length": 0.17, "variance": 2.5e-05}],
     "bar_points": [{"xyz": [x, y, z], "cov": [[...]]}],
     "points": [[x, y, z, r, g, b], ...],
     "cloud": "relative/or/absolute.csv"}

``cov``, ``label``, ``variance``, ``points`` and ``cloud`` are optional. When a
frame carries raw ``points`` or a ``cloud`` file (and ``raw=True``) the
coloured points are clustered and the cluster means become endcap and bar
observations.

Ground-truth record::

    {"t": 0.0, "poses": {"red": {"quaternion": [w, x, y, z], "translation": [x, y, z]}, ...}}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, InvalidArgumentError, ParseError, SequenceError
from .factors import (
    BAR_TO_COLOR,
    BARS,
    COLOR_TO_BAR,
    ENDS,
    BarPointObservation,
    CableObservation,
    EndcapObservation,
    FrameObservations,
    RobotGeometry,
)
from .chebyshev import lie_eval_many
from .liegroup import Rot3, quaternions_to_matrices, se3_log_batch

_COLORS = ("red", "green", "blue")


# serialization ---------------------------------------------------------------

def _num(x):
    x = float(x)
    if not math.isfinite(x):
        raise InvalidArgumentError(f"cannot serialise non-finite value {x!r}")
    return format(x, ".17g")


def _encode(obj):
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return json.dumps(obj)


def dumps(obj):
    return _encode(obj)


def frame_to_record(frame):
    rec = {"t": frame.timestamp, "endcaps": [], "cables": [], "bar_points": []}
    for e in frame.endcap_points:
        d = {"color": e.color if e.color in _COLORS else BAR_TO_COLOR[e.bar], "xyz": list(e.position)}
        if e.covariance is not None:
            d["cov"] = np.asarray(e.covariance, dtype=float).tolist()
        if e.label is not None:
            d["label"] = e.label
        rec["endcaps"].append(d)
    for c in frame.cable_lengths:
        d = {"sensor_id": int(c.sensor_id), "length": c.length}
        if c.variance is not None:
            d["variance"] = c.variance
        rec["cables"].append(d)
    for b in frame.bar_points:
        d = {"xyz": list(b.position)}
        if b.covariance is not None:
            d["cov"] = np.asarray(b.covariance, dtype=float).tolist()
        rec["bar_points"].append(d)
    return rec


def write_frames(frames, path):
    with open(path, "w") as fh:
        for f in frames:
            fh.write(dumps(frame_to_record(f)) + "\n")


def _vec3(v, what, line):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"{what} must be numeric", line=line) from None
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ParseError(f"{what} must be three finite numbers", line=line)
    return a


def _cov(v, line):
    if v is None:
        return None
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ParseError("cov must be numeric", line=line) from None
    if a.ndim == 0:
        a = float(a) * np.eye(3)
    if a.shape != (3, 3) or not np.allclose(a, a.T) or np.any(np.linalg.eigvalsh(a) <= 0):
        raise ParseError("cov must be a symmetric positive definite 3x3 matrix", line=line)
    return a


def record_to_frame(rec, line=None, base_dir=None, raw=False, cluster_kwargs=None):
    if not isinstance(rec, dict):
        raise ParseError("frame must be a JSON object", line=line)
    unknown = set(rec) - {"t", "endcaps", "cables", "bar_points", "points", "cloud"}
    if unknown:
        raise ParseError(f"unknown frame fields {sorted(unknown)}", line=line)
    if "t" not in rec:
        raise ParseError("frame is missing 't'", line=line)
    try:
        t = float(rec["t"])
    except (TypeError, ValueError):
        raise ParseError("'t' must be a number", line=line) from None
    if not math.isfinite(t):
        raise ParseError("'t' must be finite", line=line)
    ends = []
    for e in rec.get("endcaps", []):
        if not isinstance(e, dict) or "color" not in e or "xyz" not in e:
            raise ParseError(f"frame t={t}: endcap entries need 'color' and 'xyz'", line=line)
        color = e["color"]
        if color not in _COLORS:
            raise ParseError(f"frame t={t}: unknown endcap colour {color!r}", line=line)
        label = e.get("label")
        if label is not None and label not in ENDS:
            raise ParseError(f"frame t={t}: endcap label must be 'A' or 'B'", line=line)
        ends.append(EndcapObservation(color, _vec3(e["xyz"], "xyz", line), _cov(e.get("cov"), line), label))
    cables, seen = [], set()
    for c in rec.get("cables", []):
        if not isinstance(c, dict) or "sensor_id" not in c or "length" not in c:
            raise ParseError(f"frame t={t}: cable entries need 'sensor_id' and 'length'", line=line)
        sid = c["sensor_id"]
        if not isinstance(sid, int) or isinstance(sid, bool) or not 0 <= sid <= 8:
            raise ParseError(f"frame t={t}: sensor_id must be an integer in 0..8", line=line)
        if sid in seen:
            raise ParseError(f"frame t={t}: duplicate sensor_id {sid}", line=line)
        seen.add(sid)
        try:
            length = float(c["length"])
        except (TypeError, ValueError):
            raise ParseError(f"frame t={t}: cable length must be a number", line=line) from None
        if not length > 0 or not math.isfinite(length):
            raise ParseError(f"frame t={t}: cable length must be positive", line=line)
        var = c.get("variance")
        if var is not None and not float(var) > 0:
            raise ParseError(f"frame t={t}: cable variance must be positive", line=line)
        cables.append(CableObservation(sid, length, None if var is None else float(var)))
    bars = []
    for b in rec.get("bar_points", []):
        if not isinstance(b, dict) or "xyz" not in b:
            raise ParseError(f"frame t={t}: bar point entries need 'xyz'", line=line)
        bars.append(BarPointObservation(_vec3(b["xyz"], "xyz", line), _cov(b.get("cov"), line)))
    if raw and ("points" in rec or "cloud" in rec):
        e2, b2 = _cluster_frame(rec, line, base_dir, cluster_kwargs or {})
        ends.extend(e2)
        bars.extend(b2)
    return FrameObservations(t, ends, cables, bars)


def _cluster_frame(rec, line, base_dir, kwargs):
    from .clustering import ColorClass, ColoredPoint, cluster_point_cloud, read_point_cloud_csv

    if "cloud" in rec:
        path = rec["cloud"]
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        try:
            pts = read_point_cloud_csv(path)
        except OSError as exc:
            raise ParseError(f"cannot read point cloud {path!r}: {exc}", line=line) from None
    else:
        try:
            arr = np.asarray(rec["points"], dtype=float).reshape(-1, 6)
        except (TypeError, ValueError):
            raise ParseError("'points' must be rows of x,y,z,r,g,b", line=line) from None
        if arr.size and arr[:, 3:].max() > 1.0:
            arr[:, 3:] /= 255.0
        pts = [ColoredPoint(r[:3], tuple(r[3:])) for r in arr]
    clusters = cluster_point_cloud(pts, **kwargs)
    ends = [EndcapObservation(c.value, cl.mean) for c in (ColorClass.RED, ColorClass.GREEN, ColorClass.BLUE)
            for cl in clusters[c]]
    bars = [BarPointObservation(cl.mean) for cl in clusters[ColorClass.BLACK]]
    return ends, bars


def load_frames(path, raw=False, cluster_kwargs=None):
    """Stream validated frames from a JSONL file.

    Raises ``ParseError`` (with line number) on schema violations and
    ``SequenceError`` when timestamps do not strictly increase.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    prev_t = None
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            frame = record_to_frame(rec, lineno, base_dir, raw, cluster_kwargs)
            if prev_t is not None:
                if not frame.timestamp > prev_t:
                    raise SequenceError(f"line {lineno}: t={frame.timestamp} does not follow t={prev_t}")
                frame.dt_since_prev = frame.timestamp - prev_t
            prev_t = frame.timestamp
            yield frame


def write_ground_truth(gt, path):
    with open(path, "w") as fh:
        for rec in gt.to_records():
            fh.write(dumps(rec) + "\n")


def load_ground_truth(path, geom=None):
    from .simgen import GroundTruthTrajectory

    ts, quats, trans = [], [], []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
                t = float(rec["t"])
                p = {COLOR_TO_BAR[c]: (_stored_quaternion(v["quaternion"]),
                                       np.asarray(v["translation"], dtype=float).reshape(3))
                     for c, v in rec["poses"].items()}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"invalid ground-truth record: {exc}", line=lineno) from None
            if set(p) != set(BARS):
                raise ParseError("ground truth needs poses for red, green and blue", line=lineno)
            if ts and not t > ts[-1]:
                raise SequenceError(f"line {lineno}: ground-truth t={t} does not follow t={ts[-1]}")
            ts.append(t)
            quats.append([p[b][0] for b in BARS])
            trans.append([p[b][1] for b in BARS])
    if not ts:
        raise ParseError("ground-truth file is empty", line=0)
    return GroundTruthTrajectory.from_arrays(ts, quats, trans, geom)


def _stored_quaternion(values):
    # already unit and canonical values are kept bit for bit so files round-trip
    q = np.asarray(values, dtype=float).reshape(4)
    canonical = np.asarray(Rot3(*q).quaternion)
    return q if np.allclose(q, canonical, rtol=0.0, atol=1e-15) else canonical


# metrics ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    center_of_mass: float
    translation: float
    rotation: float
    times: np.ndarray = field(repr=False)
    com_series: np.ndarray = field(repr=False)
    translation_series: np.ndarray = field(repr=False)
    rotation_series: np.ndarray = field(repr=False)

    def to_dict(self, series=False):
        d = {
            "center_of_mass_error": self.center_of_mass,
            "translation_error": self.translation,
            "rotation_error": self.rotation,
            "frames": int(len(self.times)),
        }
        if series:
            d["series"] = {
                "t": self.times.tolist(),
                "center_of_mass_error": self.com_series.tolist(),
                "translation_error": self.translation_series.tolist(),
                "rotation_error": self.rotation_series.tolist(),
            }
        return d

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,center_of_mass_error,translation_error,rotation_error\n")
            for row in zip(self.times, self.com_series, self.translation_series, self.rotation_series):
                fh.write(",".join(_num(v) for v in row) + "\n")


def frame_errors(est_poses, gt_poses, geom):
    """Centre-of-mass, mean translation and mean X+Y rotation error for one instant."""
    ce = np.mean([geom.endcap_position(est_poses[b], e) for b in BARS for e in ENDS], axis=0)
    cg = np.mean([geom.endcap_position(gt_poses[b], e) for b in BARS for e in ENDS], axis=0)
    tr = np.mean([np.linalg.norm(est_poses[b].translation - gt_poses[b].translation) for b in BARS])
    rot = np.mean([np.sum(np.abs(est_poses[b].rotation.ominus(gt_poses[b].rotation)[:2])) for b in BARS])
    return float(np.linalg.norm(ce - cg)), float(tr), float(rot)


def align(times, gt_times, tolerance=None):
    """Index of the nearest ground-truth sample for each time, or -1 if none within tolerance."""
    gt_times = np.asarray(gt_times, dtype=float)
    if tolerance is None:
        dt = np.median(np.diff(gt_times)) if len(gt_times) > 1 else math.inf
        tolerance = 0.5 * dt * (1.0 + 1e-9)
    out = []
    for t in times:
        j = int(np.searchsorted(gt_times, t))
        cands = [k for k in (j - 1, j) if 0 <= k < len(gt_times)]
        k = min(cands, key=lambda k: abs(gt_times[k] - t))
        out.append(k if abs(gt_times[k] - t) <= tolerance else -1)
    return np.asarray(out, dtype=int)


def _errors_batch(R_est, t_est, R_gt, t_gt, geom):
    """Per-instant errors from stacked poses of shape ``(bars, n, 3, 3)`` and ``(bars, n, 3)``."""
    offsets = np.stack([geom.endcap_offset(e) for e in ENDS])
    ce = (np.einsum("bnij,ej->nbei", R_est, offsets) + t_est.transpose(1, 0, 2)[:, :, None]).mean(axis=(1, 2))
    cg = (np.einsum("bnij,ej->nbei", R_gt, offsets) + t_gt.transpose(1, 0, 2)[:, :, None]).mean(axis=(1, 2))
    tr = np.linalg.norm(t_est - t_gt, axis=2).mean(axis=0)
    nb, n = R_est.shape[:2]
    rel = np.swapaxes(R_gt, -1, -2) @ R_est
    w = se3_log_batch(rel.reshape(-1, 3, 3), np.zeros((nb * n, 3)))[:, :3].reshape(nb, n, 3)
    rot = np.abs(w[:, :, :2]).sum(axis=2).mean(axis=0)
    return np.linalg.norm(ce - cg, axis=1), tr, rot


def _stack(pose_dicts):
    R = np.array([[p[b].rotation.matrix for p in pose_dicts] for b in BARS])
    t = np.array([[p[b].translation for p in pose_dicts] for b in BARS])
    return R, t


def compute_metrics(estimates, gt, geom=None, tolerance=None):
    """Errors of online estimates (list of ``StateEstimate``) or a ``BarPolySet`` against ground truth."""
    geom = geom or RobotGeometry()
    gt_times = np.asarray(gt.timestamps, dtype=float)
    if hasattr(estimates, "bars"):
        lo, hi = estimates.domain
        slack = 1e-9 * max(1.0, abs(lo), abs(hi))
        idx = np.flatnonzero((gt_times >= lo - slack) & (gt_times <= hi + slack))
        times = gt_times[idx]
        ts = np.clip(times, lo, hi)
        evals = [lie_eval_many(estimates.bars[b], ts) for b in BARS]
        R_est = np.array([e[0] for e in evals])
        t_est = np.array([e[1] for e in evals])
    else:
        estimates = list(estimates)
        match = align([e.timestamp for e in estimates], gt_times, tolerance)
        keep = [k for k, i in enumerate(match) if i >= 0]
        idx = match[keep]
        times = np.array([estimates[k].timestamp for k in keep], dtype=float)
        R_est, t_est = _stack([estimates[k].poses for k in keep])
    if len(idx) == 0:
        raise AlignmentError("no estimate could be aligned with the ground truth timestamps")
    R_gt = np.stack([quaternions_to_matrices(gt.rotations[idx, j]) for j in range(len(BARS))])
    t_gt = np.transpose(gt.translations[idx], (1, 0, 2))
    com, tr, rot = _errors_batch(R_est, t_est, R_gt, t_gt, geom)
    return MetricsReport(float(com.mean()), float(tr.mean()), float(rot.mean()), times, com, tr, rot)
