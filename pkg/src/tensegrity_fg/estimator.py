"""Online per-frame estimation: hypothesis enumeration, solving and selection.

Endcap detections arrive unlabelled (one cluster per detection, coloured by
bar). For every colour the candidates are a gated pair, a single point or
nothing; each combination becomes one factor graph. All graphs are solved and
the cheapest one is kept.

Two selection rules are available:

``"penalized"`` (default)
    final cost plus ``unused_penalty`` per cluster the hypothesis leaves out.
    Using a detection is then preferred exactly when its whitened error stays
    below ``2 * unused_penalty`` (a chi-squared gate), and hypotheses whose
    penalty alone exceeds the best cost found so far are skipped.
``"per_dimension"``
    final cost divided by the whitened residual dimension.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clustering import chi2_quantile
from .errors import (
    FrameRejectedError,
    GraphEmptyError,
    InitializationError,
    LinearizationError,
    SequenceError,
)
from .factors import (
    BAR_TO_COLOR,
    BARS,
    COLOR_TO_BAR,
    ENDS,
    EndcapObservation,
    FrameObservations,
    NoiseConfig,
    RobotGeometry,
    build_frame_graph,
    pose_from_endcaps,
    pose_key,
    rot_key,
    solve_frame_graph,
)
from .liegroup import Pose3, Rot3
from .solver import LMConfig, Values


class HypothesisWarning(RuntimeWarning):
    pass


@dataclass
class EstimatorConfig:
    pair_tolerance: float = 0.3
    max_hypotheses: int = 200
    selection: str = "penalized"
    unused_penalty: float = 0.5 * chi2_quantile(3, 0.01)
    low_confidence_cost: float = 9.0
    tie_tolerance: float = 1e-12
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    lm: LMConfig = field(default_factory=lambda: LMConfig(max_iter=50, cost_tol=1e-6, compute_condition=False))
    executor: object = None

    def __post_init__(self):
        if self.selection not in ("penalized", "per_dimension"):
            raise ValueError(f"unknown selection rule {self.selection!r}")


@dataclass
class Hypothesis:
    """Per-bar option: ``("pair", i, j)``, ``("single", i)`` or ``("none",)``.

    Indices refer to the frame's endcap detections of that bar's colour.
    """

    options: dict
    cost: float = math.nan
    score: float = math.nan
    residual_dim: int = 0
    converged: bool = False
    values: Optional[Values] = None
    report: object = None

    @property
    def used(self):
        return sum(len(o) - 1 for o in self.options.values())

    def descriptor(self):
        return {BAR_TO_COLOR[b]: list(self.options[b]) for b in BARS}

    def sort_key(self):
        return tuple((("pair", "single", "none").index(self.options[b][0]),) + tuple(self.options[b][1:]) for b in BARS)


@dataclass
class StateEstimate:
    timestamp: float
    poses: dict
    cost: float
    hypothesis: dict = field(default_factory=dict)
    factor_costs: list = field(default_factory=list)
    low_confidence: bool = False
    converged: bool = True
    residual_dim: int = 0

    def to_dict(self, diagnostics=False):
        d = {
            "t": self.timestamp,
            "poses": {BAR_TO_COLOR[b]: _pose_dict(self.poses[b]) for b in BARS},
            "cost": self.cost,
            "hypothesis": self.hypothesis,
            "low_confidence": self.low_confidence,
        }
        if diagnostics:
            d["converged"] = self.converged
            d["residual_dim"] = self.residual_dim
            d["factor_costs"] = self.factor_costs
        return d

    @classmethod
    def from_dict(cls, d):
        poses = {COLOR_TO_BAR[c]: _pose_from(p) for c, p in d["poses"].items()}
        return cls(float(d["t"]), poses, float(d["cost"]), d.get("hypothesis", {}),
                   d.get("factor_costs", []), bool(d.get("low_confidence", False)),
                   bool(d.get("converged", True)), int(d.get("residual_dim", 0)))


def _pose_dict(p):
    return {"quaternion": list(map(float, p.rotation.quaternion)), "translation": list(map(float, p.translation))}


def _pose_from(d):
    return Pose3(Rot3(*d["quaternion"]), np.asarray(d["translation"], dtype=float))


def write_estimates(estimates, fh, diagnostics=False):
    for e in estimates:
        fh.write(json.dumps(e.to_dict(diagnostics)) + "\n")


def read_estimates(fh):
    return [StateEstimate.from_dict(json.loads(line)) for line in fh if line.strip()]


# hypotheses -------------------------------------------------------------------

def _by_bar(endcap_points):
    out = {b: [] for b in BARS}
    for e in endcap_points:
        out[e.bar].append(e)
    return out


def _point_of(p):
    if isinstance(p, np.ndarray):
        return p.astype(float)
    for attr in ("position", "mean"):
        v = getattr(p, attr, None)
        if isinstance(v, np.ndarray):
            return v.astype(float)
    return np.asarray(p, dtype=float)


def color_options(points, geom, tolerance=0.3):
    """Pairs passing the length gate, then singles, then ``none``."""
    L = geom.bar_length
    pos = [_point_of(p) for p in points]
    opts = []
    for i, j in itertools.combinations(range(len(pos)), 2):
        if abs(float(np.linalg.norm(pos[i] - pos[j])) - L) <= tolerance * L:
            opts.append(("pair", i, j))
    opts.extend(("single", i) for i in range(len(pos)))
    opts.append(("none",))
    return opts


def enumerate_hypotheses(clusters_per_color, geom=None, max_hypotheses=200, pair_tolerance=0.3):
    """Cross product of per-colour options in R, G, B order.

    ``clusters_per_color`` maps a colour (``"red"``/``"R"`` ...) to a list of
    points or cluster estimates. Beyond ``max_hypotheses`` the list keeps the
    hypotheses with the most pairs, then the most singles.
    """
    geom = geom or RobotGeometry()
    per_bar = {b: [] for b in BARS}
    for c, pts in clusters_per_color.items():
        key = getattr(c, "value", c)
        if key not in COLOR_TO_BAR:
            continue
        per_bar[COLOR_TO_BAR[key]] = [_point_of(p) for p in pts]
    if not any(per_bar.values()):
        return []
    opts = [color_options(per_bar[b], geom, pair_tolerance) for b in BARS]
    hyps = [Hypothesis(dict(zip(BARS, combo))) for combo in itertools.product(*opts)]
    if len(hyps) > max_hypotheses:
        warnings.warn(f"{len(hyps)} hypotheses truncated to {max_hypotheses}", HypothesisWarning)
        rank = {"pair": 0, "single": 1, "none": 2}
        hyps.sort(key=lambda h: sorted(rank[o[0]] for o in h.options.values()))
        hyps = hyps[:max_hypotheses]
    return hyps


# initialisation ---------------------------------------------------------------

def _valid_pair(pts, geom, tolerance):
    for opt in color_options(pts, geom, tolerance):
        if opt[0] == "pair":
            return pts[opt[1]].position, pts[opt[2]].position
    return None


def initialize_first_frame(obs, geom=None, pair_tolerance=0.3):
    """Seed poses for a frame without a previous estimate.

    Bars with a gated pair sit at the pair midpoint with the minimal rotation
    taking +Z onto the pair axis. The axis sign of each such bar is chosen to
    best fit the cable lengths. Bars without a pair go to the centroid of
    their observed points (or of all points) with identity rotation and are
    listed in ``values.flagged``.
    """
    geom = geom or RobotGeometry()
    groups = _by_bar(obs.endcap_points)
    pairs = {b: _valid_pair(groups[b], geom, pair_tolerance) for b in BARS}
    paired = [b for b in BARS if pairs[b] is not None]
    if len(paired) < 2:
        raise InitializationError(f"need endcap pairs for two colours, found {len(paired)}")
    all_pts = [e.position for e in obs.endcap_points]
    poses, flagged = {}, []
    for b in BARS:
        if pairs[b] is not None:
            poses[b] = pose_from_endcaps(*pairs[b])
        else:
            pts = [e.position for e in groups[b]] or all_pts
            poses[b] = Pose3(Rot3.identity(), np.mean(pts, axis=0))
            flagged.append(b)
    if obs.cable_lengths:
        best = None
        for flips in itertools.product((False, True), repeat=len(paired)):
            trial = dict(poses)
            for b, f in zip(paired, flips):
                if f:
                    trial[b] = _flip(trial[b], geom)
            err = _cable_misfit(trial, obs.cable_lengths, geom)
            if best is None or err < best[0] - 1e-12:
                best = (err, trial)
        poses = best[1]
    values = Values({pose_key(b): poses[b] for b in BARS})
    values.flagged = flagged
    return values


def shape_from_cables(cables, geom=None, iterations=50):
    """Endcap positions (in an arbitrary frame) consistent with the cable lengths.

    Gauss-Newton on the six endcap positions with the nine cables and the
    three bar lengths as equations, started from the nominal prism so the
    solution keeps its handedness. Returns ``{(bar, end): position}`` or
    ``None`` when not all nine cables are present.
    """
    geom = geom or RobotGeometry()
    if len({c.sensor_id for c in cables}) < len(geom.cable_map):
        return None
    keys = [(b, e) for b in BARS for e in ENDS]
    col = {k: i for i, k in enumerate(keys)}
    nominal = geom.nominal_poses()
    x = np.concatenate([geom.endcap_position(nominal[b], e) for b, e in keys])
    pairs = [(col[a], col[b], c.length) for c in cables for a, b in [geom.cable_map[c.sensor_id]]]
    pairs += [(col[(b, "A")], col[(b, "B")], geom.bar_length) for b in BARS]
    for _ in range(iterations):
        r = np.empty(len(pairs))
        J = np.zeros((len(pairs), x.size))
        for row, (i, j, d) in enumerate(pairs):
            diff = x[3 * i:3 * i + 3] - x[3 * j:3 * j + 3]
            n = max(float(np.linalg.norm(diff)), 1e-12)
            r[row] = n - d
            J[row, 3 * i:3 * i + 3] = diff / n
            J[row, 3 * j:3 * j + 3] = -diff / n
        dx, *_ = np.linalg.lstsq(J, -r, rcond=None)
        x += dx
        if np.linalg.norm(dx) < 1e-12:
            break
    return {k: x[3 * col[k]:3 * col[k] + 3] for k in keys}


def _kabsch(src, dst):
    """Rotation ``R`` and translation ``t`` minimising ``|R src + t - dst|``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def _refine_endcaps(x0, observed, cables, geom, noise, iterations=30):
    """Gauss-Newton on the six endcap positions against points, cables and bar lengths.

    ``observed`` maps ``(bar, end)`` to a measured position. Returns the
    refined positions and the whitened half squared residual.
    """
    keys = [(b, e) for b in BARS for e in ENDS]
    col = {k: i for i, k in enumerate(keys)}
    x = np.concatenate([x0[k] for k in keys])
    dist = [(col[a], col[b], c.length, noise.cable_sigma)
            for c in cables for a, b in [geom.cable_map[c.sensor_id]]]
    dist += [(col[(b, "A")], col[(b, "B")], geom.bar_length, 0.1 * noise.cable_sigma) for b in BARS]
    pts = [(col[k], np.asarray(z, dtype=float)) for k, z in observed.items()]
    m = len(dist) + 3 * len(pts)

    def residual(x):
        r = np.empty(m)
        J = np.zeros((m, x.size))
        for row, (i, j, d, s) in enumerate(dist):
            diff = x[3 * i:3 * i + 3] - x[3 * j:3 * j + 3]
            n = max(float(np.linalg.norm(diff)), 1e-12)
            r[row] = (n - d) / s
            J[row, 3 * i:3 * i + 3] = diff / (n * s)
            J[row, 3 * j:3 * j + 3] = -diff / (n * s)
        row = len(dist)
        for i, z in pts:
            r[row:row + 3] = (x[3 * i:3 * i + 3] - z) / noise.endcap_sigma
            J[row:row + 3, 3 * i:3 * i + 3] = np.eye(3) / noise.endcap_sigma
            row += 3
        return r, J

    r, J = residual(x)
    cost = 0.5 * float(r @ r)
    lam = 1e-6
    for _ in range(iterations):
        H = J.T @ J
        g = J.T @ r
        dx = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
        r2, J2 = residual(x + dx)
        c2 = 0.5 * float(r2 @ r2)
        if c2 < cost:
            done = cost - c2 < 1e-10 * max(cost, 1.0)
            x, r, J, cost = x + dx, r2, J2, c2
            lam = max(lam * 0.1, 1e-12)
            if done:
                break
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    return {k: x[3 * col[k]:3 * col[k] + 3] for k in keys}, cost


def register_shape(obs, geom=None, noise=None):
    """Seed poses from the cable-derived shape and the endcap points.

    The shape solved from the cables is rigidly aligned to the points under
    every A/B assignment (at most two points per colour); each alignment is
    then refined jointly against points, cables and bar lengths, and the
    assignment with the lowest refined cost wins. Returns ``(poses, cost)``
    or ``None`` when fewer than three points or not all cables are available.
    """
    geom = geom or RobotGeometry()
    noise = noise or NoiseConfig()
    groups = _by_bar(obs.endcap_points)
    if any(len(g) > 2 for g in groups.values()) or len(obs.endcap_points) < 3:
        return None
    shape = shape_from_cables(obs.cable_lengths, geom)
    if shape is None:
        return None
    choices = []
    for b in BARS:
        n = len(groups[b])
        if n == 0:
            choices.append([()])
        elif n == 1:
            choices.append([("A",), ("B",)])
        else:
            choices.append([("A", "B"), ("B", "A")])
    best = None
    for combo in itertools.product(*choices):
        observed = {}
        for b, labels in zip(BARS, combo):
            for e, lab in zip(groups[b], labels):
                observed[(b, lab)] = e.position
        src = np.asarray([shape[k] for k in observed])
        dst = np.asarray(list(observed.values()))
        R, t = _kabsch(src, dst)
        start = {k: R @ v + t for k, v in shape.items()}
        start.update(observed)
        ends, cost = _refine_endcaps(start, observed, obs.cable_lengths, geom, noise)
        if best is None or cost < best[0] - 1e-12:
            best = (cost, ends)
    cost, ends = best
    poses = {b: pose_from_endcaps(ends[(b, "A")], ends[(b, "B")]) for b in BARS}
    return poses, cost


def _flip(pose, geom):
    return Pose3(pose.rotation * geom.r_off, pose.translation)


def _cable_misfit(poses, cables, geom):
    err = 0.0
    for c in cables:
        (bj, ej), (bk, ek) = geom.cable_map[c.sensor_id]
        d = geom.endcap_position(poses[bj], ej) - geom.endcap_position(poses[bk], ek)
        err += (float(np.linalg.norm(d)) - c.length) ** 2
    return err


def _label(points, pose, geom):
    """Attach A/B labels by proximity to the reference pose's modelled endcaps."""
    ends = {e: geom.endcap_position(pose, e) for e in ENDS}
    if len(points) == 1:
        p = points[0]
        d = {e: float(np.linalg.norm(p.position - ends[e])) for e in ENDS}
        return [_relabel(p, "A" if d["A"] <= d["B"] else "B")]
    p, q = points
    straight = np.sum((p.position - ends["A"]) ** 2) + np.sum((q.position - ends["B"]) ** 2)
    swapped = np.sum((p.position - ends["B"]) ** 2) + np.sum((q.position - ends["A"]) ** 2)
    if straight <= swapped:
        return [_relabel(p, "A"), _relabel(q, "B")]
    return [_relabel(p, "B"), _relabel(q, "A")]


def _relabel(e, label):
    return EndcapObservation(e.color, e.position, e.covariance, label)


def _canonical_poses(values, geom):
    """Bar poses whose +Z points at the endcap the cable map calls ``A``."""
    out = {}
    for b in BARS:
        X = values[pose_key(b)]
        ka = rot_key(b, "A")
        if ka in values and values[ka].angle > 0.5 * math.pi:
            X = _flip(X, geom)
        out[b] = X
    return out


# per-frame estimation ---------------------------------------------------------

def _sub_observations(obs, hyp, groups):
    pts = []
    for b in BARS:
        opt = hyp.options[b]
        pts.extend(groups[b][i] for i in opt[1:])
    return FrameObservations(obs.timestamp, pts, list(obs.cable_lengths), list(obs.bar_points), obs.dt_since_prev)


def _prepare(obs, hyp, groups, prev_poses, seed, geom, cfg):
    sub = _sub_observations(obs, hyp, groups)
    ref = prev_poses if prev_poses is not None else seed
    labelled = []
    for b in BARS:
        chosen = [groups[b][i] for i in hyp.options[b][1:]]
        if chosen:
            labelled.extend(_label(chosen, ref[b], geom))
    sub.endcap_points = labelled
    return build_frame_graph(sub, prev_poses, geom, cfg.noise, initial=ref)


def _solve(hyp, factors, init, cfg, staged=False):
    values, report = solve_frame_graph(factors, init, cfg.lm, staged)
    hyp.values = values
    hyp.report = report
    hyp.cost = report.final_cost
    hyp.residual_dim = report.residual_dim
    hyp.converged = report.converged or report.message == "max_iter reached"
    return hyp


def _score(h, cfg, n_clusters):
    if cfg.selection == "per_dimension":
        return h.cost / max(h.residual_dim, 1)
    return h.cost + cfg.unused_penalty * (n_clusters - h.used)


def estimate_frame(obs, prev=None, geom=None, config=None):
    """Solve every hypothesis for one frame and return the selected estimate."""
    geom = geom or RobotGeometry()
    cfg = config or EstimatorConfig()
    if obs.empty:
        raise GraphEmptyError(f"frame at t={obs.timestamp} has no observations")
    prev_poses = None if prev is None else prev.poses
    if prev is not None and obs.dt_since_prev is None:
        obs = FrameObservations(obs.timestamp, obs.endcap_points, obs.cable_lengths, obs.bar_points,
                                obs.timestamp - prev.timestamp)
    groups = _by_bar(obs.endcap_points)
    n_clusters = len(obs.endcap_points)
    hyps = enumerate_hypotheses({b: groups[b] for b in BARS}, geom, cfg.max_hypotheses, cfg.pair_tolerance)
    if not hyps:
        hyps = [Hypothesis({b: ("none",) for b in BARS})]
    hyps.sort(key=lambda h: (-h.used, h.sort_key()))

    fallback = None
    if prev_poses is None:
        fallback = _first_seed(obs, hyps, groups, geom, cfg)

    def prepare(h):
        seed = fallback
        if prev_poses is None:
            reg = register_shape(_sub_observations(obs, h, groups), geom, cfg.noise)
            if reg is not None:
                seed = reg[0]
        return _prepare(obs, h, groups, prev_poses, seed, geom, cfg)

    def run(h, graph=None):
        try:
            factors, init = graph if graph is not None else prepare(h)
            return _solve(h, factors, init, cfg, staged=prev_poses is None)
        except (LinearizationError, np.linalg.LinAlgError):
            h.converged = False
            return h

    if cfg.executor is not None:
        solved = list(cfg.executor.map(run, hyps))
    else:
        # fewest unused clusters first: once the penalty alone exceeds the
        # best score no later hypothesis can win
        solved = []
        best = math.inf
        for h in hyps:
            if cfg.selection == "penalized" and cfg.unused_penalty * (n_clusters - h.used) > best:
                break
            run(h)
            solved.append(h)
            if h.converged:
                best = min(best, _score(h, cfg, n_clusters))
    good = [h for h in solved if h.converged and math.isfinite(h.cost)]
    for h in good:
        h.score = _score(h, cfg, n_clusters)
    if not good:
        if prev is None:
            raise FrameRejectedError(f"no hypothesis converged at t={obs.timestamp}")
        return StateEstimate(obs.timestamp, dict(prev.poses), math.nan, {}, [], True, False, 0)
    lo = min(h.score for h in good)
    tied = [h for h in good if h.score <= lo + cfg.tie_tolerance * max(1.0, abs(lo))]
    chosen = min(tied, key=lambda h: (-h.used, h.sort_key()))
    rep = chosen.report
    per_dim = chosen.cost / max(chosen.residual_dim, 1)
    return StateEstimate(
        timestamp=obs.timestamp,
        poses=_canonical_poses(chosen.values, geom),
        cost=chosen.cost,
        hypothesis=chosen.descriptor(),
        factor_costs=list(rep.factor_costs),
        low_confidence=per_dim > cfg.low_confidence_cost,
        converged=rep.converged,
        residual_dim=chosen.residual_dim,
    )


def _first_seed(obs, hyps, groups, geom, cfg):
    for h in hyps:
        try:
            return dict_poses(initialize_first_frame(_sub_observations(obs, h, groups), geom, cfg.pair_tolerance))
        except InitializationError:
            continue
    from .factors import _nominal_seed
    return _nominal_seed(obs, geom)


def dict_poses(values):
    return {b: values[pose_key(b)] for b in BARS}


def run_sequence(frames, geom=None, config=None, on_reject=None):
    """Filter a time-ordered frame stream; rejected frames are skipped."""
    geom = geom or RobotGeometry()
    out = []
    prev = None
    last_t = -math.inf
    for obs in frames:
        if not obs.timestamp > last_t:
            raise SequenceError(f"timestamps must increase: {obs.timestamp} after {last_t}")
        last_t = obs.timestamp
        if prev is not None:
            obs = FrameObservations(obs.timestamp, obs.endcap_points, obs.cable_lengths, obs.bar_points,
                                    obs.timestamp - prev.timestamp)
        try:
            est = estimate_frame(obs, prev, geom, config)
        except (FrameRejectedError, GraphEmptyError) as exc:
            if on_reject is not None:
                on_reject(obs, exc)
            continue
        out.append(est)
        prev = est
    return out
