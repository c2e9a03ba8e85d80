"""Colour classification and incremental Mahalanobis-gated clustering of point clouds.

Each colour set is clustered on its own. A pass seeds a cluster with the first
observation, then tries to fuse every following observation into it; a fusion
is accepted when the gate statistic

    e_i = D2(x_k, X', P_k) + D2(z_i, X', Sigma_i)

is below the upper-tail chi-squared quantile. ``X'`` is the information-weighted
fusion of the cluster belief ``N(x_k, P_k)`` and ``N(z_i, Sigma_i)``; ``e_i`` is
then the whitened error of that two-factor problem. Rejected observations seed
the next cluster. Cluster centres are then fed through further passes as
points (carrying the per-colour measurement covariance) until a pass merges
nothing.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ParseError


class ClusteringWarning(RuntimeWarning):
    pass


class ColorClass(enum.Enum):
    RED = "red"
    GREEN = "green"
    BLUE = "blue"
    BLACK = "black"
    OTHER = "other"


DEFAULT_SWATCHES = {
    ColorClass.RED: (1.0, 0.0, 0.0),
    ColorClass.GREEN: (0.0, 1.0, 0.0),
    ColorClass.BLUE: (0.0, 0.0, 1.0),
    ColorClass.BLACK: (0.0, 0.0, 0.0),
}
DEFAULT_REJECTION_RADIUS = 0.5

ENDCAP_COVARIANCE = 1e-4
BLACK_COVARIANCE = 4e-4


@dataclass(frozen=True)
class ColoredPoint:
    position: np.ndarray
    color: tuple


@dataclass(frozen=True)
class WeightedObservation:
    value: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.value, dtype=float).reshape(-1)
        c = np.asarray(self.covariance, dtype=float)
        if c.ndim == 0:
            c = float(c) * np.eye(v.size)
        _require_spd(c)
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "covariance", c)


@dataclass(frozen=True)
class ClusterEstimate:
    mean: np.ndarray
    covariance: np.ndarray
    count: int = 1
    members: tuple = field(default=(), compare=False, repr=False)


def _require_spd(c):
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or not np.allclose(c, c.T, rtol=1e-10, atol=1e-14):
        raise InvalidArgumentError("covariance must be a symmetric square matrix")
    try:
        np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        raise InvalidArgumentError("covariance is not positive definite") from None
    return c


def classify_color(c, swatches=None, rejection_radius=DEFAULT_REJECTION_RADIUS):
    swatches = DEFAULT_SWATCHES if swatches is None else swatches
    c = np.asarray(c, dtype=float)
    best, best_d = ColorClass.OTHER, math.inf
    for cls, ref in swatches.items():
        d = float(np.linalg.norm(c - np.asarray(ref, dtype=float)))
        if d < best_d:
            best, best_d = cls, d
    return best if best_d <= rejection_radius else ColorClass.OTHER


def mahalanobis_sq(z, mean, cov):
    cov = _require_spd(cov)
    d = np.asarray(z, dtype=float) - np.asarray(mean, dtype=float)
    L = np.linalg.cholesky(cov)
    y = np.linalg.solve(L, d)
    return float(y @ y)


def gaussian_fuse(prior, z):
    """Product of two Gaussians: information matrices add, means are information weighted."""
    Pinv = np.linalg.inv(prior.covariance)
    Rinv = np.linalg.inv(z.covariance)
    cov = np.linalg.inv(Pinv + Rinv)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (Pinv @ prior.mean + Rinv @ z.value)
    return ClusterEstimate(mean, cov, prior.count + 1)


# chi-squared quantile --------------------------------------------------------

def _gamma_p_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a, x):
    # modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a, x):
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_contfrac(a, x)


def chi2_cdf(x, dof):
    return regularized_gamma_p(0.5 * dof, 0.5 * x)


def chi2_quantile(dof, alpha):
    """Upper-tail quantile: the ``x`` with ``P(chi2_dof > x) = alpha``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must be in (0, 1), got {alpha!r}")
    if dof < 1:
        raise InvalidArgumentError(f"dof must be >= 1, got {dof!r}")
    target = 1.0 - alpha
    a = 0.5 * dof
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < target:
        hi *= 2.0
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = chi2_cdf(x, dof) - target
        if f < 0.0:
            lo = x
        else:
            hi = x
        # density of chi2 at x
        pdf = math.exp((a - 1.0) * math.log(0.5 * x) - 0.5 * x - math.lgamma(a)) * 0.5 if x > 0 else 0.0
        step = f / pdf if pdf > 0.0 else math.inf
        nx = x - step
        if not lo < nx < hi:
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 1e-14 * max(1.0, x):
            x = nx
            break
        x = nx
    return x


# clustering -----------------------------------------------------------------

def _one_pass(items, threshold):
    """Items are ``(z, R, members)``; returns groups as ``(mean, cov, members)``."""
    out = []
    rest = items
    while rest:
        m, P, members = rest[0]
        members = list(members)
        Pinv = np.linalg.inv(P)
        rejected = []
        for z, R, mz in rest[1:]:
            Rinv = np.linalg.inv(R)
            S = np.linalg.inv(Pinv + Rinv)
            X = S @ (Pinv @ m + Rinv @ z)
            dm = m - X
            dz = z - X
            e = float(dm @ Pinv @ dm + dz @ Rinv @ dz)
            if e < threshold:
                m, P, Pinv = X, S, Pinv + Rinv
                members.extend(mz)
            else:
                rejected.append((z, R, mz))
        out.append((m, P, members))
        rest = rejected
    return out


def _fuse_members(observations, members):
    info = np.zeros_like(observations[members[0]].covariance)
    vec = np.zeros_like(observations[members[0]].value)
    for i in members:
        Rinv = np.linalg.inv(observations[i].covariance)
        info += Rinv
        vec += Rinv @ observations[i].value
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return ClusterEstimate(cov @ vec, cov, len(members), tuple(members))


def cluster(observations, alpha=0.05, dof=3, max_passes=10):
    """Cluster weighted point observations.

    Returns one ``ClusterEstimate`` per cluster; each input observation is
    supported by exactly one output cluster (``members`` holds the indices).
    """
    obs = list(observations)
    if not obs:
        return []
    threshold = chi2_quantile(dof, alpha)
    groups = _one_pass([(o.value, o.covariance, [i]) for i, o in enumerate(obs)], threshold)
    for _ in range(max_passes):
        items = [(_fuse_members(obs, mem).mean, obs[mem[0]].covariance, mem) for _, _, mem in groups]
        merged = _one_pass(items, threshold)
        if len(merged) == len(groups):
            break
        groups = merged
    else:
        warnings.warn(f"clustering did not reach a fixed point in {max_passes} passes", ClusteringWarning)
    return [_fuse_members(obs, mem) for _, _, mem in groups]


def classify_points(points, swatches=None, rejection_radius=DEFAULT_REJECTION_RADIUS):
    """Split ``(position, rgb)`` pairs by colour class; ``OTHER`` points are dropped."""
    out = {c: [] for c in ColorClass if c is not ColorClass.OTHER}
    for p in points:
        pos, rgb = (p.position, p.color) if isinstance(p, ColoredPoint) else p
        cls = classify_color(rgb, swatches, rejection_radius)
        if cls is not ColorClass.OTHER:
            out[cls].append(np.asarray(pos, dtype=float))
    return out


def default_covariances():
    return {
        ColorClass.RED: ENDCAP_COVARIANCE * np.eye(3),
        ColorClass.GREEN: ENDCAP_COVARIANCE * np.eye(3),
        ColorClass.BLUE: ENDCAP_COVARIANCE * np.eye(3),
        ColorClass.BLACK: BLACK_COVARIANCE * np.eye(3),
    }


def cluster_point_cloud(points, alpha=0.05, dof=3, covariances=None, swatches=None,
                        rejection_radius=DEFAULT_REJECTION_RADIUS, executor: Executor | None = None):
    """Classify a coloured cloud and cluster each colour set independently."""
    covariances = default_covariances() if covariances is None else covariances
    by_color = classify_points(points, swatches, rejection_radius)

    def run(color):
        cov = covariances[color]
        return cluster([WeightedObservation(p, cov) for p in by_color[color]], alpha, dof)

    colors = list(by_color)
    if executor is None:
        results = [run(c) for c in colors]
    else:
        results = list(executor.map(run, colors))
    return dict(zip(colors, results))


def read_point_cloud_csv(path):
    """Read ``x,y,z,r,g,b`` rows; a non-numeric first row is treated as a header.

    Colours above 1 are taken as 8-bit and rescaled to ``[0, 1]``.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise ParseError(f"non-numeric field in {row!r}", line=lineno) from None
            if len(vals) != 6:
                raise ParseError(f"expected 6 fields (x,y,z,r,g,b), got {len(vals)}", line=lineno)
            rows.append(vals)
    if not rows:
        return []
    data = np.asarray(rows)
    rgb = data[:, 3:]
    if rgb.max() > 1.0:
        rgb = rgb / 255.0
    return [ColoredPoint(data[i, :3], tuple(rgb[i])) for i in range(len(data))]
