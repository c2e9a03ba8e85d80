"""Dense Levenberg-Marquardt over manifold-valued variables.

Variables are ``Pose3`` (6 DOF), ``Rot3`` (3 DOF) or flat numpy vectors.
Updates are applied on the right (``x (+) dx``), and Jacobians are taken with
respect to the same right perturbations. Factors may supply analytic
Jacobians; otherwise central differences are used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, LinearizationError
from .liegroup import Pose3, Rot3

FD_STEP = 1e-6
_STACKED_LIMIT = 200_000


class VariableKey(NamedTuple):
    kind: str
    bar: str = ""
    endcap: str = ""
    index: int = 0

    def __str__(self):
        return f"{self.kind}{self.bar}{self.endcap}{self.index}"


def tangent_dim(v):
    if isinstance(v, Pose3):
        return 6
    if isinstance(v, Rot3):
        return 3
    return int(np.size(v))


def retract(v, d):
    if isinstance(v, (Pose3, Rot3)):
        return v.oplus(d)
    return np.asarray(v, dtype=float) + np.reshape(d, np.shape(v))


def local(a, b):
    """``a (-) b`` in the tangent space at ``b``."""
    if isinstance(a, (Pose3, Rot3)):
        return a.ominus(b)
    return (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).reshape(-1)


class Values(dict):
    """Mapping ``VariableKey -> manifold element``."""

    def ordering(self):
        return sorted(self.keys())

    def retract(self, dx, ordering=None):
        ordering = self.ordering() if ordering is None else ordering
        out = Values()
        pos = 0
        for k in ordering:
            v = self[k]
            n = tangent_dim(v)
            out[k] = retract(v, dx[pos:pos + n])
            pos += n
        return out

    def copy(self):
        return Values(self)


class NoiseModel:
    """Gaussian noise given by per-dimension sigmas or a full covariance."""

    __slots__ = ("dim", "_inv_sigma", "_sqrt_info")

    def __init__(self, dim, inv_sigma=None, sqrt_info=None):
        self.dim = dim
        self._inv_sigma = inv_sigma
        self._sqrt_info = sqrt_info

    @classmethod
    def isotropic(cls, dim, sigma):
        if not sigma > 0:
            raise InvalidArgumentError(f"sigma must be positive, got {sigma!r}")
        return cls(dim, inv_sigma=np.full(dim, 1.0 / sigma))

    @classmethod
    def diagonal(cls, sigmas):
        sigmas = np.asarray(sigmas, dtype=float).reshape(-1)
        if np.any(sigmas <= 0):
            raise InvalidArgumentError("sigmas must be positive")
        return cls(sigmas.size, inv_sigma=1.0 / sigmas)

    @classmethod
    def gaussian(cls, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise InvalidArgumentError("covariance must be symmetric")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InvalidArgumentError("covariance is not positive definite") from None
        return cls(cov.shape[0], sqrt_info=np.linalg.inv(L))

    @property
    def covariance(self):
        if self._inv_sigma is not None:
            return np.diag(1.0 / self._inv_sigma ** 2)
        Si = self._sqrt_info
        return np.linalg.inv(Si.T @ Si)

    def whiten(self, r):
        if self._inv_sigma is not None:
            return r * self._inv_sigma
        return self._sqrt_info @ r

    def whiten_jacobian(self, J):
        if self._inv_sigma is not None:
            return J * self._inv_sigma[:, None]
        return self._sqrt_info @ J


class Factor:
    """Residual over an ordered list of variables with a Gaussian noise model.

    Subclasses implement ``evaluate(*vals)`` and may override
    ``evaluate_jacobians(*vals)`` returning ``(r, [J_k])``.
    """

    analytic = False

    def __init__(self, keys, noise, name=None):
        self.keys = tuple(keys)
        self.noise = noise
        self.name = name or type(self).__name__

    @property
    def dim(self):
        return self.noise.dim

    def evaluate(self, *vals):
        raise NotImplementedError

    def evaluate_jacobians(self, *vals):
        return self.evaluate(*vals), numerical_jacobians(self.evaluate, vals)

    def residual(self, values):
        r = np.asarray(self.evaluate(*[values[k] for k in self.keys]), dtype=float).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise LinearizationError(f"factor {self.name} on {[str(k) for k in self.keys]} returned a non-finite residual")
        return r

    def linearize(self, values):
        """Unwhitened residual and one Jacobian block per key."""
        vals = [values[k] for k in self.keys]
        r, Js = self.evaluate_jacobians(*vals)
        r = np.asarray(r, dtype=float).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise LinearizationError(f"factor {self.name} on {[str(k) for k in self.keys]} returned a non-finite residual")
        return r, Js

    def cost(self, values):
        w = self.noise.whiten(self.residual(values))
        return 0.5 * float(w @ w)


class FunctionFactor(Factor):
    """Factor from a plain residual function; Jacobians by finite differences."""

    def __init__(self, keys, fn, noise, jacobian_fn=None, name=None):
        super().__init__(keys, noise, name or getattr(fn, "__name__", None))
        self._fn = fn
        self._jac = jacobian_fn

    def evaluate(self, *vals):
        return self._fn(*vals)

    def evaluate_jacobians(self, *vals):
        if self._jac is None:
            return super().evaluate_jacobians(*vals)
        return self._fn(*vals), self._jac(*vals)


class PriorFactor(Factor):
    """``x (-) target``."""

    analytic = True

    def __init__(self, key, target, noise):
        super().__init__([key], noise)
        self.target = target

    def evaluate(self, x):
        return local(x, self.target)

    def evaluate_jacobians(self, x):
        r = local(x, self.target)
        if isinstance(x, Pose3):
            from .liegroup import se3_right_jacobian_inv
            return r, [se3_right_jacobian_inv(r)]
        if isinstance(x, Rot3):
            from .liegroup import so3_right_jacobian_inv
            return r, [so3_right_jacobian_inv(r)]
        return r, [np.eye(r.size)]


def numerical_jacobians(fn, vals, step=FD_STEP):
    """Central-difference Jacobians of ``fn(*vals)`` w.r.t. right perturbations."""
    vals = list(vals)
    Js = []
    for i, v in enumerate(vals):
        n = tangent_dim(v)
        cols = []
        for k in range(n):
            d = np.zeros(n)
            d[k] = step
            vals[i] = retract(v, d)
            rp = np.asarray(fn(*vals), dtype=float).reshape(-1)
            vals[i] = retract(v, -d)
            rm = np.asarray(fn(*vals), dtype=float).reshape(-1)
            cols.append((rp - rm) / (2.0 * step))
        vals[i] = v
        Js.append(np.stack(cols, axis=1) if cols else np.zeros((0, 0)))
    return Js


def check_jacobians(factor, values, step=FD_STEP):
    """Largest relative deviation between a factor's Jacobians and central differences."""
    vals = [values[k] for k in factor.keys]
    _, Ja = factor.evaluate_jacobians(*vals)
    Jn = numerical_jacobians(factor.evaluate, vals, step)
    worst = 0.0
    for a, n in zip(Ja, Jn):
        a = np.asarray(a, dtype=float)
        scale = max(1.0, float(np.abs(n).max()) if n.size else 1.0)
        worst = max(worst, float(np.abs(a - n).max()) / scale if n.size else 0.0)
    return worst


@dataclass
class LMConfig:
    max_iter: int = 100
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e8
    cost_tol: float = 1e-9
    step_tol: float = 1e-9
    condition_threshold: float = 1e10
    compute_condition: bool = True


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    factor_costs: list = field(default_factory=list)
    near_singular: bool = False
    condition: float = float("nan")
    residual_dim: int = 0
    message: str = ""

    def to_dict(self):
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "factor_costs": list(self.factor_costs),
            "near_singular": self.near_singular,
            "condition": None if not math.isfinite(self.condition) else self.condition,
            "residual_dim": self.residual_dim,
            "message": self.message,
        }


def linearize(factor, values):
    """Residual and per-key Jacobian blocks (unwhitened)."""
    return factor.linearize(values)


class _Layout:
    def __init__(self, values, factors):
        missing = {k for f in factors for k in f.keys if k not in values}
        if missing:
            raise InvalidArgumentError(f"factors reference missing variables: {sorted(map(str, missing))}")
        self.ordering = values.ordering()
        self.offsets = {}
        pos = 0
        for k in self.ordering:
            self.offsets[k] = pos
            pos += tangent_dim(values[k])
        self.size = pos
        self.slices = [[(self.offsets[k], self.offsets[k] + tangent_dim(values[k])) for k in f.keys] for f in factors]


def total_cost(factors, values):
    c = 0.0
    for f in factors:
        w = f.noise.whiten(f.evaluate(*[values[k] for k in f.keys]))
        c += float(w @ w)
    if not math.isfinite(c):
        for f in factors:
            f.residual(values)  # raises, naming the factor
    return 0.5 * c


def _normal_equations(factors, values, layout):
    n = layout.size
    dims = [f.dim for f in factors]
    m = sum(dims)
    if m * n <= _STACKED_LIMIT:
        # small problems: one stacked whitened Jacobian and a single product
        J = np.zeros((m, n))
        r = np.empty(m)
        row = 0
        for f, slc, d in zip(factors, layout.slices, dims):
            rf, Js = f.evaluate_jacobians(*[values[k] for k in f.keys])
            r[row:row + d] = f.noise.whiten(rf)
            for (a0, a1), Ja in zip(slc, Js):
                J[row:row + d, a0:a1] += f.noise.whiten_jacobian(np.asarray(Ja, dtype=float))
            row += d
        if not np.all(np.isfinite(r)):
            for f in factors:
                f.linearize(values)  # raises, naming the factor
        return J.T @ J, J.T @ r, 0.5 * float(r @ r)
    H = np.zeros((n, n))
    g = np.zeros(n)
    cost = 0.0
    for f, slc in zip(factors, layout.slices):
        r, Js = f.linearize(values)
        rw = f.noise.whiten(r)
        cost += 0.5 * float(rw @ rw)
        Jw = [f.noise.whiten_jacobian(np.asarray(J, dtype=float)) for J in Js]
        for (a0, a1), Ja in zip(slc, Jw):
            g[a0:a1] += Ja.T @ rw
            for (b0, b1), Jb in zip(slc, Jw):
                H[a0:a1, b0:b1] += Ja.T @ Jb
    return H, g, cost


def optimize(factors, initial, config=None):
    """Minimise ``0.5 * sum ||r||^2_Sigma``; returns ``(Values, SolveReport)``."""
    cfg = config or LMConfig()
    factors = list(factors)
    values = Values(initial)
    layout = _Layout(values, factors)
    rdim = sum(f.dim for f in factors)
    H, g, cost = _normal_equations(factors, values, layout)
    initial_cost = cost
    lam = cfg.lambda_init
    iterations = 0
    converged = False
    message = "max_iter reached"
    eye = np.eye(layout.size)
    for _ in range(cfg.max_iter):
        stepped = False
        while True:
            try:
                L = np.linalg.cholesky(H + lam * eye)
                dx = -np.linalg.solve(L.T, np.linalg.solve(L, g))
            except np.linalg.LinAlgError:
                dx = None
            if dx is None:
                lam *= cfg.lambda_factor
                if lam > cfg.lambda_max:
                    message = "damped system singular"
                    break
                continue
            if float(np.linalg.norm(dx)) < cfg.step_tol:
                converged = True
                message = "step below tolerance"
                break
            trial = values.retract(dx, layout.ordering)
            new_cost = total_cost(factors, trial)
            if new_cost < cost:
                rel = (cost - new_cost) / cost if cost > 0 else 0.0
                values, cost = trial, new_cost
                iterations += 1
                lam = max(lam / cfg.lambda_factor, 1e-12)
                stepped = True
                if rel < cfg.cost_tol or cost == 0.0:
                    converged = True
                    message = "relative cost decrease below tolerance"
                break
            lam *= cfg.lambda_factor
            if lam > cfg.lambda_max:
                message = "damping exceeded lambda_max"
                break
        if converged or not stepped:
            break
        H, g, cost = _normal_equations(factors, values, layout)
    report = SolveReport(
        initial_cost=initial_cost,
        final_cost=cost,
        iterations=iterations,
        converged=converged,
        factor_costs=[f.cost(values) for f in factors],
        residual_dim=rdim,
        message=message,
    )
    if cfg.compute_condition and layout.size:
        ev = np.linalg.eigvalsh(H)
        hi, lo = float(ev[-1]), float(ev[0])
        report.condition = math.inf if lo <= hi * 1e-300 or lo <= 0.0 else hi / lo
        report.near_singular = not report.condition <= cfg.condition_threshold
    return values, report
