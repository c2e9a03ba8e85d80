"""Shared builders for synthetic tensegrity frames."""

import numpy as np

from tensegrity_fg.chebyshev import LiePoly, VecPoly, make_basis
from tensegrity_fg.factors import (
    BAR_TO_COLOR,
    BARS,
    ENDS,
    CableObservation,
    EndcapObservation,
    FrameObservations,
    RobotGeometry,
)
from tensegrity_fg.liegroup import Pose3
from tensegrity_fg.trajectory import BarPolySet


def random_poses(rng, geom=None, spread=0.05):
    """Nominal prism moved rigidly and perturbed per bar."""
    geom = geom or RobotGeometry()
    body = Pose3.exp(np.concatenate([rng.normal(0, 0.8, 3), rng.normal(0, 0.3, 3)]))
    return {b: body.compose(p).oplus(rng.normal(0, spread, 6)) for b, p in geom.nominal_poses().items()}


def endcap_positions(poses, geom=None):
    geom = geom or RobotGeometry()
    return {(b, e): geom.endcap_position(poses[b], e) for b in BARS for e in ENDS}


def cable_lengths(poses, geom=None):
    geom = geom or RobotGeometry()
    ends = endcap_positions(poses, geom)
    return [float(np.linalg.norm(ends[a] - ends[b])) for a, b in geom.cable_map]


def make_frame(poses, geom=None, t=0.0, labels=True, drop=(), cables=True, dt=None, rng=None,
               endcap_sigma=0.0, cable_sigma=0.0, extra=()):
    """Observations of ``poses``; ``drop`` lists ``(bar, end)`` endcaps to omit."""
    geom = geom or RobotGeometry()
    rng = rng or np.random.default_rng(0)
    pts = []
    for (b, e), p in endcap_positions(poses, geom).items():
        if (b, e) in drop:
            continue
        p = p + rng.normal(0, endcap_sigma, 3) if endcap_sigma else p
        pts.append(EndcapObservation(BAR_TO_COLOR[b], p, label=e if labels else None))
    for color, p in extra:
        pts.append(EndcapObservation(color, np.asarray(p, dtype=float)))
    cab = []
    if cables:
        for i, length in enumerate(cable_lengths(poses, geom)):
            cab.append(CableObservation(i, length + (rng.normal(0, cable_sigma) if cable_sigma else 0.0)))
    return FrameObservations(t, pts, cab, [], dt)


def gt_as_polys(gt, degree=120, body_offset=None):
    """Bar polynomials interpolating the ground truth at Chebyshev points."""
    domain = (float(gt.timestamps[0]), float(gt.timestamps[-1]))
    basis = make_basis(degree, domain)
    bars = {}
    for b in BARS:
        # ground truth is sampled at 200 Hz; interpolate linearly in the tangent space between samples
        idx = np.clip(np.searchsorted(gt.timestamps, basis.points), 1, len(gt) - 1)
        anchor = gt.pose(0, b)
        vals = []
        for t, i in zip(basis.points, idx):
            a, c = gt.pose(i - 1, b), gt.pose(i, b)
            s = (t - gt.timestamps[i - 1]) / (gt.timestamps[i] - gt.timestamps[i - 1])
            X = a.oplus(s * c.ominus(a))
            if body_offset is not None:
                X = X.compose(body_offset)
            vals.append(X.ominus(anchor))
        bars[b] = LiePoly(anchor, VecPoly(basis, np.array(vals).T))
    return BarPolySet(bars)
