"""Chebyshev interpolants stored as values at Chebyshev points of the second kind.

A degree-N polynomial on ``[t_lo, t_hi]`` is held as an ``M x (N+1)`` matrix
of values at ``t_j = map(cos(j pi / N))``; the nodes therefore run from
``t_hi`` down to ``t_lo``. Evaluation at any in-domain time is the dot product
of the value matrix with a barycentric weight row (see ``ChebBasis.weights_at``).
Coefficients in the ``T_k`` basis are only produced on demand, for chopping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, InvalidArgumentError, OutOfDomainError, RankDeficiencyError
from .liegroup import Pose3, Rot3, se3_exp_batch

DEFAULT_CHOP_TOL = 1e-8
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class ChebBasis:
    degree: int
    domain: tuple
    points: np.ndarray = field(repr=False, compare=False)
    bary_weights: np.ndarray = field(repr=False, compare=False)

    @property
    def size(self):
        return self.degree + 1

    @property
    def canonical_points(self):
        return np.cos(np.arange(self.size) * math.pi / self.degree)

    def contains(self, t):
        lo, hi = self.domain
        slack = _DOMAIN_SLACK * max(1.0, abs(lo), abs(hi))
        return lo - slack <= t <= hi + slack

    def _check(self, t):
        if not self.contains(t):
            raise OutOfDomainError(f"t={t!r} outside domain [{self.domain[0]!r}, {self.domain[1]!r}]")

    def weights_at(self, t):
        """Row ``w`` with ``values @ w`` equal to the interpolant at ``t``."""
        t = float(t)
        self._check(t)
        diff = t - self.points
        hit = np.flatnonzero(diff == 0.0)
        w = np.zeros(self.size)
        if hit.size:
            w[hit[0]] = 1.0
            return w
        q = self.bary_weights / diff
        return q / q.sum()

    def weight_matrix(self, ts):
        """Stack of ``weights_at`` rows for many times, shape ``(len(ts), N+1)``."""
        ts = np.asarray(ts, dtype=float).reshape(-1)
        if ts.size == 0:
            return np.zeros((0, self.size))
        lo, hi = self.domain
        slack = _DOMAIN_SLACK * max(1.0, abs(lo), abs(hi))
        bad = (ts < lo - slack) | (ts > hi + slack)
        if bad.any():
            raise OutOfDomainError(f"t={ts[bad][0]!r} outside domain [{lo!r}, {hi!r}]")
        diff = ts[:, None] - self.points[None, :]
        exact = diff == 0.0
        rows = exact.any(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = self.bary_weights[None, :] / diff
            W = q / q.sum(axis=1, keepdims=True)
        if rows.any():
            W[rows] = exact[rows].astype(float)
            # a row can only hit one node; keep the first if ties ever occur
            W[rows] = W[rows] / W[rows].sum(axis=1, keepdims=True)
        return W

    def differentiation_matrix(self):
        """``D`` with ``(values @ D.T)`` the derivative values at the nodes (per unit t)."""
        x = self.canonical_points
        w = self.bary_weights
        n = self.size
        D = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    D[i, j] = (w[j] / w[i]) / (x[i] - x[j])
            D[i, i] = -D[i].sum()
        lo, hi = self.domain
        return D * (2.0 / (hi - lo))


def make_basis(degree, domain=(-1.0, 1.0)):
    if int(degree) != degree or degree < 1:
        raise InvalidArgumentError(f"degree must be an integer >= 1, got {degree!r}")
    degree = int(degree)
    lo, hi = float(domain[0]), float(domain[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
        raise InvalidArgumentError(f"domain must satisfy t_lo < t_hi, got {domain!r}")
    tau = np.cos(np.arange(degree + 1) * math.pi / degree)
    # exact endpoints and symmetric interior
    tau[0], tau[-1] = 1.0, -1.0
    if degree % 2 == 0:
        tau[degree // 2] = 0.0
    points = lo + (tau + 1.0) * 0.5 * (hi - lo)
    points[0], points[-1] = hi, lo
    w = np.ones(degree + 1)
    w[1::2] = -1.0
    w[0] *= 0.5
    w[-1] *= 0.5
    points.flags.writeable = False
    w.flags.writeable = False
    return ChebBasis(degree, (lo, hi), points, w)


@dataclass(frozen=True)
class VecPoly:
    basis: ChebBasis
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape[1] != self.basis.size:
            raise InvalidArgumentError(
                f"values have {v.shape[1]} columns, basis of degree {self.basis.degree} needs {self.basis.size}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("polynomial values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dimension(self):
        return self.values.shape[0]

    @property
    def degree(self):
        return self.basis.degree

    @property
    def domain(self):
        return self.basis.domain

    def __call__(self, t):
        return self.values @ self.basis.weights_at(t)

    def eval_many(self, ts):
        """Values at many times, shape ``(len(ts), M)``."""
        return self.basis.weight_matrix(ts) @ self.values.T

    def to_dict(self):
        lo, hi = self.basis.domain
        return {
            "degree": self.basis.degree,
            "domain": [lo, hi],
            "dimension": self.dimension,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        basis = make_basis(int(d["degree"]), tuple(d["domain"]))
        values = np.asarray(d["values"], dtype=float).reshape(int(d["dimension"]), basis.size)
        return cls(basis, values)


def eval(p, t):
    """Evaluate ``p`` at scalar ``t``; out-of-domain times raise."""
    return p(t)


def fit_interpolation(f, basis):
    cols = []
    for t in basis.points:
        y = np.atleast_1d(np.asarray(f(t), dtype=float))
        if not np.all(np.isfinite(y)):
            raise FitError(f"function returned non-finite value at t={t!r}")
        cols.append(y)
    return VecPoly(basis, np.stack(cols, axis=1))


def fit_pseudospectral(observations, basis):
    """Weighted least-squares values-matrix from scattered ``(t, z, cov)`` samples.

    ``cov`` may be ``None`` (identity), a scalar variance, or an ``M x M``
    matrix. Raises ``RankDeficiencyError`` when fewer than ``N+1`` distinct
    times are available.
    """
    obs = list(observations)
    if not obs:
        raise RankDeficiencyError("no observations", starved="all")
    ts = np.array([float(o[0]) for o in obs])
    Z = np.array([np.atleast_1d(np.asarray(o[1], dtype=float)) for o in obs])
    M = Z.shape[1]
    n = basis.size
    distinct = np.unique(ts).size
    if distinct < n:
        raise RankDeficiencyError(
            f"{distinct} distinct observation times cannot determine a degree-{basis.degree} "
            f"polynomial ({n} needed)", starved="all")
    W = basis.weight_matrix(ts)
    covs = [o[2] if len(o) > 2 else None for o in obs]
    if all(c is None for c in covs):
        X, *_ = np.linalg.lstsq(W, Z, rcond=None)
        return VecPoly(basis, X.T)
    # whitened Kronecker system on vec(values) (row-major: M blocks of N+1)
    rows, rhs = [], []
    for w, z, c in zip(W, Z, covs):
        L = _whitener(c, M)
        rows.append(L @ np.kron(np.eye(M), w[None, :]))
        rhs.append(L @ z)
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return VecPoly(basis, x.reshape(M, n))


def _whitener(cov, M):
    if cov is None:
        return np.eye(M)
    c = np.asarray(cov, dtype=float)
    if c.ndim == 0:
        return np.eye(M) / math.sqrt(float(c))
    # inv(chol(cov)) gives L with L cov L^T = I
    return np.linalg.inv(np.linalg.cholesky(c))


def _cos_table(n):
    N = n - 1
    jk = np.outer(np.arange(n), np.arange(n))
    return np.cos(jk * math.pi / N)


def values_to_coeffs(p):
    """Chebyshev series coefficients ``a_k`` of each row (direct O(N^2) transform)."""
    values = p.values if isinstance(p, VecPoly) else np.asarray(p, dtype=float)
    values = np.atleast_2d(values)
    n = values.shape[1]
    N = n - 1
    C = _cos_table(n)
    f = values.copy()
    f[:, 0] *= 0.5
    f[:, -1] *= 0.5
    a = (2.0 / N) * f @ C
    a[:, 0] *= 0.5
    a[:, -1] *= 0.5
    return a


def coeffs_to_values(coeffs):
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    return coeffs @ _cos_table(coeffs.shape[1]).T


def chop_degree(coeffs, tol=DEFAULT_CHOP_TOL, plateau=3):
    """Smallest degree whose trailing coefficients all sit below ``tol`` relative.

    The trailing run of small coefficients must be at least ``plateau`` long,
    otherwise the full degree is returned.
    """
    if not 0.0 < tol < 1.0:
        raise InvalidArgumentError(f"tol must be in (0, 1), got {tol!r}")
    c = np.atleast_2d(np.asarray(coeffs, dtype=float))
    mags = np.abs(c).max(axis=0)
    scale = mags.max() if mags.size else 0.0
    N = c.shape[1] - 1
    if scale == 0.0:
        return 0
    big = np.flatnonzero(mags >= tol * scale)
    d = int(big[-1])
    if N - d < plateau:
        return N
    return d


def derivative(p):
    if p.basis.degree < 1:
        raise InvalidArgumentError("derivative needs degree >= 1")
    D = p.basis.differentiation_matrix()
    return VecPoly(p.basis, p.values @ D.T)


def resample(p, degree):
    """Re-express ``p`` on a basis of another degree (exact when ``degree >= p.degree``)."""
    basis = make_basis(degree, p.basis.domain)
    return VecPoly(basis, p.eval_many(basis.points).T)


def truncate(p, degree):
    """Drop series terms above ``degree`` and return the result on a degree-``degree`` basis."""
    a = values_to_coeffs(p)[:, : degree + 1]
    basis = make_basis(max(1, degree), p.basis.domain)
    if degree == 0:
        return VecPoly(basis, np.repeat(a[:, :1], 2, axis=1))
    return VecPoly(basis, coeffs_to_values(a))


@dataclass(frozen=True)
class LiePoly:
    """Pose trajectory ``anchor (+) lambda(t)`` with ``lambda`` a 6-row VecPoly."""

    anchor: Pose3
    tangent: VecPoly

    def __post_init__(self):
        if self.tangent.dimension != 6:
            raise InvalidArgumentError("LiePoly tangent polynomial must have 6 rows")

    @property
    def domain(self):
        return self.tangent.domain

    @property
    def degree(self):
        return self.tangent.degree

    def __call__(self, t):
        return self.anchor.oplus(self.tangent(t))

    def velocity(self, t):
        return derivative(self.tangent)(t)

    def to_dict(self):
        d = self.tangent.to_dict()
        d["anchor"] = pose_to_dict(self.anchor)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(pose_from_dict(d["anchor"]), VecPoly.from_dict(d))


def lie_eval(p, t):
    return p(t)


def lie_eval_many(p, ts):
    """Rotation matrices ``(n, 3, 3)`` and translations ``(n, 3)`` of ``p`` at ``ts``."""
    dR, dt = se3_exp_batch(p.tangent.eval_many(ts))
    Ra = p.anchor.rotation.matrix
    return Ra @ dR, dt @ Ra.T + p.anchor.translation


def lie_velocity(p, t):
    return p.velocity(t)


def pose_to_dict(p):
    return {"quaternion": list(p.rotation.quaternion), "translation": p.translation.tolist()}


def pose_from_dict(d):
    return Pose3(Rot3(*d["quaternion"]), d["translation"])


def dumps(p):
    return json.dumps(p.to_dict())


def loads(s):
    d = json.loads(s)
    return LiePoly.from_dict(d) if "anchor" in d else VecPoly.from_dict(d)
