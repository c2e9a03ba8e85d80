"""Continuous-time smoothing of a whole trajectory with Chebyshev polynomials.

Each of the six endcaps gets a 3-row polynomial. Endcap points constrain
their own polynomial linearly; cable lengths couple pairs of polynomials
through the norm of a difference, so the joint fit is a small nonlinear least
squares problem whose variables are the six flattened value matrices. Bar
poses are then derived from the endcap polynomials and re-expressed as Lie
polynomials, with the degree trimmed by coefficient chopping.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .chebyshev import (
    DEFAULT_CHOP_TOL,
    LiePoly,
    VecPoly,
    chop_degree,
    fit_pseudospectral,
    make_basis,
    truncate,
    values_to_coeffs,
)
from .errors import DegenerateAxisError, FitError, InvalidArgumentError, RankDeficiencyError
from .factors import (
    BAR_TO_COLOR,
    BARS,
    COLOR_TO_BAR,
    ENDS,
    NoiseConfig,
    RobotGeometry,
    minimal_rotation,
)
from .liegroup import Pose3, Rot3
from .solver import Factor, LMConfig, NoiseModel, Values, optimize

ENDCAPS = tuple((b, e) for b in BARS for e in ENDS)


class DegreeSearchWarning(RuntimeWarning):
    pass


def endcap_name(key):
    return f"{key[0]}{key[1]}"


def _parse_endcap(name):
    return (name[0], name[1])


# data ------------------------------------------------------------------------

@dataclass
class TrajectoryData:
    """Labelled endcap points and cable lengths gathered from many frames."""

    points: dict          # endcap key -> (times (K,), positions (K, 3), frame ids (K,))
    cables: dict          # sensor id -> (times (K,), lengths (K,), frame ids (K,))
    frame_times: np.ndarray

    @classmethod
    def from_frames(cls, frames):
        pts = {k: ([], [], []) for k in ENDCAPS}
        cab = {}
        times = []
        for fi, f in enumerate(frames):
            times.append(f.timestamp)
            for e in f.endcap_points:
                if e.label is None:
                    raise InvalidArgumentError(
                        f"endcap observation at t={f.timestamp} has no A/B label; run label_frames first")
                k = (COLOR_TO_BAR[e.color], e.label)
                pts[k][0].append(f.timestamp)
                pts[k][1].append(np.asarray(e.position, dtype=float))
                pts[k][2].append(fi)
            for c in f.cable_lengths:
                lst = cab.setdefault(int(c.sensor_id), ([], [], []))
                lst[0].append(f.timestamp)
                lst[1].append(float(c.length))
                lst[2].append(fi)
        points = {k: (np.asarray(v[0], dtype=float), np.asarray(v[1], dtype=float).reshape(-1, 3),
                      np.asarray(v[2], dtype=int)) for k, v in pts.items()}
        cables = {s: (np.asarray(v[0], dtype=float), np.asarray(v[1], dtype=float), np.asarray(v[2], dtype=int))
                  for s, v in sorted(cab.items())}
        return cls(points, cables, np.asarray(times, dtype=float))

    def subset(self, frame_ids):
        keep = np.zeros(len(self.frame_times), dtype=bool)
        keep[np.asarray(frame_ids, dtype=int)] = True
        pts = {k: (t[keep[f]], p[keep[f]], f[keep[f]]) for k, (t, p, f) in self.points.items()}
        cab = {s: (t[keep[f]], z[keep[f]], f[keep[f]]) for s, (t, z, f) in self.cables.items()}
        return TrajectoryData(pts, cab, self.frame_times)

    @property
    def domain(self):
        ts = [t for t, _, _ in self.points.values() if t.size] + [t for t, _, _ in self.cables.values() if t.size]
        if not ts:
            raise FitError("no observations")
        allt = np.concatenate(ts)
        return float(allt.min()), float(allt.max())


def label_frames(frames, geom=None, estimates=None, gate=0.1, config=None):
    """Attach A/B labels to endcap points using online pose estimates.

    Each point is matched to the nearest modelled endcap of its colour; points
    farther than ``gate`` from both are dropped as outliers. Without
    ``estimates`` the online estimator is run first.
    """
    from .estimator import run_sequence
    from .factors import EndcapObservation, FrameObservations

    geom = geom or RobotGeometry()
    frames = list(frames)
    if estimates is None:
        estimates = run_sequence(frames, geom, config)
    by_t = {e.timestamp: e for e in estimates}
    out = []
    for f in frames:
        est = by_t.get(f.timestamp)
        if est is None:
            out.append(FrameObservations(f.timestamp, [], list(f.cable_lengths), list(f.bar_points), f.dt_since_prev))
            continue
        taken = set()
        pts = []
        cands = []
        for i, e in enumerate(f.endcap_points):
            b = e.bar
            for end in ENDS:
                d = float(np.linalg.norm(geom.endcap_position(est.poses[b], end) - e.position))
                if d <= gate:
                    cands.append((d, i, b, end))
        for d, i, b, end in sorted(cands):
            if i in taken or (b, end) in taken:
                continue
            taken.update((i, (b, end)))
            e = f.endcap_points[i]
            pts.append(EndcapObservation(e.color, e.position, e.covariance, end))
        out.append(FrameObservations(f.timestamp, pts, list(f.cable_lengths), list(f.bar_points), f.dt_since_prev))
    return out


# polynomial sets -------------------------------------------------------------

@dataclass
class EndcapPolySet:
    polys: dict
    final_cost: float = math.nan
    iterations: int = 0

    def __post_init__(self):
        domains = {p.domain for p in self.polys.values()}
        if len(domains) != 1 or set(self.polys) != set(ENDCAPS):
            raise InvalidArgumentError("an endcap set needs six polynomials on one domain")

    @property
    def domain(self):
        return next(iter(self.polys.values())).domain

    @property
    def degree(self):
        return next(iter(self.polys.values())).degree

    def __call__(self, key, t):
        return self.polys[key](t)

    def positions(self, t):
        return {k: p(t) for k, p in self.polys.items()}

    def to_dict(self):
        return {
            "domain": list(self.domain),
            "degree": self.degree,
            "final_cost": self.final_cost,
            "endcaps": {endcap_name(k): p.to_dict() for k, p in self.polys.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls({_parse_endcap(n): VecPoly.from_dict(p) for n, p in d["endcaps"].items()},
                   float(d.get("final_cost", math.nan)))


@dataclass
class BarPolySet:
    bars: dict
    chopped_degrees: dict = field(default_factory=dict)
    length_violation: float = 0.0

    @property
    def domain(self):
        return next(iter(self.bars.values())).domain

    def to_dict(self):
        return {
            "domain": list(self.domain),
            "bars": {BAR_TO_COLOR[b]: p.to_dict() for b, p in self.bars.items()},
            "chopped_degrees": {BAR_TO_COLOR[b]: d for b, d in self.chopped_degrees.items()},
            "length_violation": self.length_violation,
        }

    @classmethod
    def from_dict(cls, d):
        bars = {COLOR_TO_BAR[c]: LiePoly.from_dict(p) for c, p in d["bars"].items()}
        chopped = {COLOR_TO_BAR[c]: int(v) for c, v in d.get("chopped_degrees", {}).items()}
        return cls(bars, chopped, float(d.get("length_violation", 0.0)))


@dataclass
class DegreeSearchReport:
    tried: list              # [(degree, train_rms, test_rms)]
    selected: int
    split: str
    n_train: int
    n_test: int

    def to_dict(self):
        return {
            "tried": [{"degree": d, "train_rms": a, "test_rms": b} for d, a, b in self.tried],
            "selected": self.selected,
            "split": self.split,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


# factors ---------------------------------------------------------------------

def _flat_jacobian(W):
    """Jacobian of ``(V @ W.T).T.ravel()`` w.r.t. ``V.ravel()`` for a 3-row ``V``."""
    K, n = W.shape
    J = np.zeros((K, 3, 3, n))
    for m in range(3):
        J[:, m, m, :] = W
    return J.reshape(3 * K, 3 * n)


class EndcapChebFactor(Factor):
    """All point observations of one endcap: ``E w_k - z_k`` stacked over ``k``."""

    analytic = True

    def __init__(self, key, times, positions, basis, sigma):
        self.W = basis.weight_matrix(times)
        self.Z = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.n = basis.size
        super().__init__([key], NoiseModel.isotropic(3 * len(self.Z), sigma), "endcap_cheb")
        self._J = _flat_jacobian(self.W)

    def evaluate(self, v):
        V = np.reshape(v, (3, self.n))
        return (self.W @ V.T - self.Z).ravel()

    def evaluate_jacobians(self, v):
        return self.evaluate(v), [self._J]


class CableChebFactor(Factor):
    """All readings of one cable sensor: ``|E_j w_k - E_k w_k| - z_k``."""

    analytic = True

    def __init__(self, key_j, key_k, times, lengths, basis, sigma, sensor_id=None):
        self.W = basis.weight_matrix(times)
        self.z = np.asarray(lengths, dtype=float)
        self.n = basis.size
        self.sensor_id = sensor_id
        super().__init__([key_j, key_k], NoiseModel.isotropic(len(self.z), sigma), "cable_cheb")

    def _diff(self, vj, vk):
        return self.W @ (np.reshape(vj, (3, self.n)) - np.reshape(vk, (3, self.n))).T

    def evaluate(self, vj, vk):
        return np.linalg.norm(self._diff(vj, vk), axis=1) - self.z

    def evaluate_jacobians(self, vj, vk):
        d = self._diff(vj, vk)
        nrm = np.linalg.norm(d, axis=1)
        u = np.where(nrm[:, None] > 1e-9, d / np.maximum(nrm, 1e-300)[:, None], np.array([1.0, 0.0, 0.0]))
        J = (u[:, :, None] * self.W[:, None, :]).reshape(len(self.z), 3 * self.n)
        return nrm - self.z, [J, -J]


def _var_key(key):
    from .solver import VariableKey
    return VariableKey("E", key[0], key[1], 0)


# fitting ---------------------------------------------------------------------

def _support(data, geom, basis_size):
    """Distinct times at which each endcap is pinned (directly or by three cables)."""
    cable_times = {k: {} for k in ENDCAPS}
    for s, (t, _, _) in data.cables.items():
        a, b = geom.cable_map[s]
        for key in (a, b):
            for tt in t:
                cable_times[key][tt] = cable_times[key].get(tt, 0) + 1
    out = {}
    for k in ENDCAPS:
        direct = set(data.points[k][0].tolist())
        via = {tt for tt, c in cable_times[k].items() if c >= 3}
        out[k] = len(direct | via)
    return out


def _multilaterate(spheres):
    """Point at distances ``d_i`` from centres ``c_i`` (at least four spheres)."""
    C = np.array([c for c, _ in spheres])
    d = np.array([r for _, r in spheres])
    A = 2.0 * (C[1:] - C[0])
    b = d[0] ** 2 - d[1:] ** 2 + np.sum(C[1:] ** 2, axis=1) - np.sum(C[0] ** 2)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x


def _initial_polys(data, geom, basis):
    init = {}
    for k in ENDCAPS:
        t, p, _ = data.points[k]
        if np.unique(t).size >= basis.size:
            init[k] = fit_pseudospectral(list(zip(t, p)), basis).values
    progress = True
    while progress and len(init) < len(ENDCAPS):
        progress = False
        for k in ENDCAPS:
            if k in init:
                continue
            samples = {tt: pp for tt, pp in zip(*data.points[k][:2])}
            by_time = {}
            for s, (ts, zs, _) in data.cables.items():
                a, b = geom.cable_map[s]
                other = b if a == k else a if b == k else None
                if other is None or other not in init:
                    continue
                for tt, zz in zip(ts, zs):
                    by_time.setdefault(tt, []).append((other, zz))
            sib = (k[0], "B" if k[1] == "A" else "A")
            for tt, lst in by_time.items():
                if tt in samples:
                    continue
                spheres = [(init[o] @ basis.weights_at(tt), zz) for o, zz in lst]
                if sib in init:
                    spheres.append((init[sib] @ basis.weights_at(tt), geom.bar_length))
                if len(spheres) >= 4:
                    samples[tt] = _multilaterate(spheres)
            if len(samples) >= basis.size:
                ts = sorted(samples)
                init[k] = fit_pseudospectral([(tt, samples[tt]) for tt in ts], basis).values
                progress = True
    return init


def fit_endcap_polys(data, geom=None, degree=20, noise=None, domain=None, lm=None):
    """Joint least-squares fit of the six endcap polynomials.

    ``data`` is a ``TrajectoryData`` or a list of labelled frames.
    """
    geom = geom or RobotGeometry()
    noise = noise or NoiseConfig()
    if not isinstance(data, TrajectoryData):
        data = TrajectoryData.from_frames(data)
    basis = make_basis(degree, domain or data.domain)
    support = _support(data, geom, basis.size)
    starved = [k for k in ENDCAPS if support[k] < basis.size]
    if starved:
        k = starved[0]
        raise RankDeficiencyError(
            f"endcap {endcap_name(k)} is pinned at {support[k]} distinct times; degree {degree} needs {basis.size}",
            starved=endcap_name(k))
    init = _initial_polys(data, geom, basis)
    missing = [k for k in ENDCAPS if k not in init]
    if missing:
        raise RankDeficiencyError(f"cannot initialise endcap {endcap_name(missing[0])} from its neighbours",
                                  starved=endcap_name(missing[0]))
    factors = []
    for k in ENDCAPS:
        t, p, _ = data.points[k]
        if t.size:
            factors.append(EndcapChebFactor(_var_key(k), t, p, basis, noise.endcap_sigma))
    for s, (t, z, _) in data.cables.items():
        if t.size:
            a, b = geom.cable_map[s]
            factors.append(CableChebFactor(_var_key(a), _var_key(b), t, z, basis, noise.cable_sigma, s))
    values = Values({_var_key(k): init[k].ravel() for k in ENDCAPS})
    cfg = lm or LMConfig(compute_condition=False)
    values, report = optimize(factors, values, cfg)
    polys = {k: VecPoly(basis, np.reshape(values[_var_key(k)], (3, basis.size))) for k in ENDCAPS}
    return EndcapPolySet(polys, report.final_cost, report.iterations)


def endcap_rms(polys, data):
    """RMS of endcap point residuals (meters per coordinate)."""
    sq, n = 0.0, 0
    for k, (t, p, _) in data.points.items():
        if t.size:
            r = polys.polys[k].eval_many(t) - p
            sq += float(np.sum(r * r))
            n += r.size
    return math.sqrt(sq / n) if n else math.nan


def degree_search(data, geom=None, split_fraction=0.2, step=5, noise=None, initial_degree=None,
                  max_degree=None):
    """Train/test line search on the endcap polynomial degree.

    Every ``round(1/split_fraction)``-th frame goes to the test set. Starting
    from ``max(2, round(0.1 * n_test))`` the degree grows by ``step`` while the
    held-out endcap RMS keeps decreasing. The last improving degree is refitted
    on all frames.
    """
    geom = geom or RobotGeometry()
    if not isinstance(data, TrajectoryData):
        data = TrajectoryData.from_frames(data)
    if not 0.0 < split_fraction < 1.0:
        raise InvalidArgumentError("split_fraction must be in (0, 1)")
    n = len(data.frame_times)
    if n < 20:
        raise InvalidArgumentError(f"degree search needs at least 20 frames, got {n}")
    every = max(2, int(round(1.0 / split_fraction)))
    ids = np.arange(n)
    test_ids = ids[ids % every == every - 1]
    train_ids = ids[ids % every != every - 1]
    train, test = data.subset(train_ids), data.subset(test_ids)
    domain = data.domain
    deg = max(2, int(round(0.1 * len(test_ids)))) if initial_degree is None else int(initial_degree)
    feasible = _max_feasible_degree(train, geom)
    if max_degree is not None:
        feasible = min(feasible, max_degree)
    if feasible < 1:
        raise RankDeficiencyError("training split cannot support any polynomial", starved="all")
    if deg > feasible:
        warnings.warn(f"initial degree {deg} exceeds training support; using {feasible}", DegreeSearchWarning)
        deg = feasible
    tried = []
    best = None
    while True:
        polys = fit_endcap_polys(train, geom, deg, noise, domain)
        tr, te = endcap_rms(polys, train), endcap_rms(polys, test)
        tried.append((deg, tr, te))
        if best is not None and not te < best[1]:
            break
        best = (deg, te)
        if deg + step > feasible:
            break
        deg += step
    selected = best[0]
    final = fit_endcap_polys(data, geom, selected, noise, domain)
    report = DegreeSearchReport(tried, selected, f"every {every}th frame held out", len(train_ids), len(test_ids))
    return final, report


def _max_feasible_degree(data, geom):
    s = _support(data, geom, 0)
    return min(s.values()) - 1


def fit_bar_polys(endcaps, geom=None, chop_tol=DEFAULT_CHOP_TOL):
    """Bar pose polynomials derived from the endcap polynomials."""
    geom = geom or RobotGeometry()
    basis = make_basis(endcaps.degree, endcaps.domain)
    order = np.argsort(basis.points, kind="stable")
    bars, chopped = {}, {}
    violation = 0.0
    for b in BARS:
        A = endcaps.polys[(b, "A")].eval_many(basis.points)
        B = endcaps.polys[(b, "B")].eval_many(basis.points)
        poses = [None] * basis.size
        R = Rot3.identity()
        for j in order:
            d = A[j] - B[j]
            n = float(np.linalg.norm(d))
            if n < 1e-12:
                raise DegenerateAxisError(f"bar {b} endcaps coincide at t={basis.points[j]}", time=float(basis.points[j]))
            violation = max(violation, abs(n - geom.bar_length))
            R = minimal_rotation(R.matrix[:, 2], d / n) * R
            poses[j] = Pose3(R, 0.5 * (A[j] + B[j]))
        anchor = poses[order[0]]
        tangent = VecPoly(basis, np.stack([p.ominus(anchor) for p in poses], axis=1))
        deg = chop_degree(values_to_coeffs(tangent), chop_tol)
        if deg < basis.degree:
            tangent = truncate(tangent, deg)
        bars[b] = LiePoly(anchor, tangent)
        chopped[b] = deg
    return BarPolySet(bars, chopped, violation)


def query(traj, t):
    """Poses and tangent-coordinate velocities of the three bars at ``t``."""
    poses = {b: p(t) for b, p in traj.bars.items()}
    twists = {b: p.velocity(t) for b, p in traj.bars.items()}
    return poses, twists


def geometry_hash(geom):
    return hashlib.sha256(json.dumps(geom.to_dict(), sort_keys=True).encode()).hexdigest()


def trajectory_document(endcaps, bars, geom, report=None):
    return {
        "manifest": {
            "domain": list(bars.domain),
            "geometry_hash": geometry_hash(geom),
            "geometry": geom.to_dict(),
            "degree_report": None if report is None else report.to_dict(),
        },
        "endcaps": endcaps.to_dict(),
        "bars": bars.to_dict(),
    }


def load_trajectory_document(d):
    return EndcapPolySet.from_dict(d["endcaps"]), BarPolySet.from_dict(d["bars"]), d.get("manifest", {})
