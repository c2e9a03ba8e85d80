import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import chebyshev as npcheb

from tensegrity_fg.chebyshev import (
    LiePoly,
    VecPoly,
    chop_degree,
    coeffs_to_values,
    derivative,
    dumps,
    eval,
    fit_interpolation,
    fit_pseudospectral,
    lie_eval,
    lie_eval_many,
    lie_velocity,
    loads,
    make_basis,
    resample,
    truncate,
    values_to_coeffs,
)
from tensegrity_fg.errors import FitError, InvalidArgumentError, OutOfDomainError, RankDeficiencyError
from tensegrity_fg.liegroup import Pose3


def poly_from_coeffs(coeffs, domain):
    """VecPoly sampling the numpy Chebyshev series ``coeffs`` (in canonical tau) on ``domain``."""
    lo, hi = domain
    basis = make_basis(len(coeffs) - 1, domain)
    tau = (2 * basis.points - lo - hi) / (hi - lo)
    return VecPoly(basis, npcheb.chebval(tau, coeffs)[None, :])


# basis -----------------------------------------------------------------------

def test_basis_points():
    assert np.array_equal(make_basis(2).points, [1.0, 0.0, -1.0])
    assert np.array_equal(make_basis(2, (0, 2)).points, [2.0, 1.0, 0.0])
    s = math.sqrt(2) / 2
    assert np.allclose(make_basis(4).points, [1, s, 0, -s, -1], atol=1e-15)


def test_basis_weights_and_order():
    b = make_basis(7, (3.0, 5.0))
    assert np.all(np.diff(b.points) < 0)
    assert np.array_equal(b.bary_weights, [0.5, -1, 1, -1, 1, -1, 1, -0.5])


@pytest.mark.parametrize("degree,domain", [(0, (-1, 1)), (3, (1, 1)), (2, (2, 1)), (1.5, (-1, 1))])
def test_basis_rejects_bad_arguments(degree, domain):
    with pytest.raises(InvalidArgumentError):
        make_basis(degree, domain)


# evaluation --------------------------------------------------------------------

def test_square_reproduced():
    p = fit_interpolation(lambda t: t * t, make_basis(2))
    assert abs(eval(p, 0.5)[0] - 0.25) < 1e-14


def test_node_short_circuit_is_bit_exact():
    b = make_basis(9, (0.0, 3.0))
    p = VecPoly(b, np.random.default_rng(0).normal(size=(2, 10)))
    for j, t in enumerate(b.points):
        assert np.array_equal(p(t), p.values[:, j])


def test_sin_and_exp_interpolation():
    b20 = make_basis(20)
    p = fit_interpolation(np.sin, b20)
    assert abs(p(0.3)[0] - math.sin(0.3)) < 1e-12
    xs = np.linspace(-1, 1, 1000)
    assert np.max(np.abs(p.eval_many(xs)[:, 0] - np.sin(xs))) < 1e-10
    q = fit_interpolation(np.exp, make_basis(16))
    assert np.max(np.abs(q.eval_many(xs)[:, 0] - np.exp(xs))) < 1e-12


def test_interpolation_trivia():
    assert np.allclose(fit_interpolation(lambda t: 3.0, make_basis(5)).values, 3.0)
    assert np.array_equal(fit_interpolation(lambda t: t, make_basis(1)).values, [[1.0, -1.0]])
    with pytest.raises(FitError):
        fit_interpolation(lambda t: math.nan, make_basis(3))


def test_out_of_domain_is_rejected():
    p = fit_interpolation(lambda t: t, make_basis(3, (0, 1)))
    with pytest.raises(OutOfDomainError):
        p(1.01)
    with pytest.raises(OutOfDomainError):
        p.eval_many([0.5, -0.2])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.floats(-50, 50), st.floats(0.1, 100), st.integers(0, 2**31 - 1))
def test_polynomials_reproduced(degree, lo, width, seed):
    rng = np.random.default_rng(seed)
    deg = int(rng.integers(0, degree + 1))
    coeffs = rng.normal(size=deg + 1)
    domain = (lo, lo + width)
    p = poly_from_coeffs(np.pad(coeffs, (0, degree - deg)), domain)
    ts = rng.uniform(*domain, size=1000)
    ref = npcheb.chebval((2 * ts - 2 * lo - width) / width, coeffs)
    scale = max(1.0, np.abs(ref).max())
    assert np.max(np.abs(p.eval_many(ts)[:, 0] - ref)) <= 1e-12 * scale * max(1, degree)


# pseudo-spectral fit --------------------------------------------------------------

def test_pseudospectral_exact_cubic():
    b = make_basis(3, (-1, 1))
    f = lambda t: np.array([t ** 3 - 2 * t + 1, 0.5 * t ** 2])
    ts = np.linspace(-1, 1, 10)
    p = fit_pseudospectral([(t, f(t), None) for t in ts], b)
    assert np.max(np.abs(p.values - np.stack([f(t) for t in b.points], 1))) < 1e-10
    resid = sum(np.sum((p(t) - f(t)) ** 2) for t in ts)
    assert resid < 1e-18 * len(ts)


def test_pseudospectral_weighted_matches_scipy_lstsq():
    from scipy.linalg import lstsq

    rng = np.random.default_rng(1)
    b = make_basis(4, (0, 2))
    ts = rng.uniform(0, 2, 30)
    zs = rng.normal(size=(30, 2))
    covs = [np.diag(rng.uniform(0.1, 2.0, 2)) for _ in ts]
    p = fit_pseudospectral(list(zip(ts, zs, covs)), b)
    W = b.weight_matrix(ts)
    ref = []
    for m in range(2):
        s = np.array([1 / math.sqrt(c[m, m]) for c in covs])
        ref.append(lstsq(W * s[:, None], zs[:, m] * s)[0])
    assert np.allclose(p.values, np.array(ref), atol=1e-10)


def test_pseudospectral_rank_deficiency():
    with pytest.raises(RankDeficiencyError):
        fit_pseudospectral([(0.0, [1.0], None)], make_basis(1))
    with pytest.raises(RankDeficiencyError):
        fit_pseudospectral([(0.0, [1.0]), (0.0, [2.0]), (0.5, [1.0])], make_basis(2))


def test_pseudospectral_noisy_sin():
    rng = np.random.default_rng(2)
    ts = rng.uniform(-1, 1, 200)
    obs = [(t, [math.sin(t) + rng.normal(0, 0.01)], 1e-4) for t in ts]
    p = fit_pseudospectral(obs, make_basis(12))
    xs = np.linspace(-1, 1, 500)
    assert math.sqrt(np.mean((p.eval_many(xs)[:, 0] - np.sin(xs)) ** 2)) < 0.01


# coefficients and chopping ----------------------------------------------------------

def test_coefficient_trivia():
    b = make_basis(6)
    assert np.allclose(values_to_coeffs(fit_interpolation(lambda t: 2.5, b)), [[2.5, 0, 0, 0, 0, 0, 0]], atol=1e-14)
    assert np.allclose(values_to_coeffs(fit_interpolation(lambda t: t, b)), [[0, 1, 0, 0, 0, 0, 0]], atol=1e-14)
    assert np.allclose(values_to_coeffs(fit_interpolation(lambda t: 2 * t * t - 1, b)),
                       [[0, 0, 1, 0, 0, 0, 0]], atol=1e-13)


def test_coefficients_match_numpy():
    rng = np.random.default_rng(3)
    c = rng.normal(size=12)
    p = poly_from_coeffs(c, (-1, 1))
    assert np.allclose(values_to_coeffs(p)[0], c, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_coefficient_roundtrip(n, seed):
    v = np.random.default_rng(seed).normal(size=(3, n + 1))
    back = coeffs_to_values(values_to_coeffs(v))
    assert np.max(np.abs(back - v)) <= 1e-12 * max(1.0, np.abs(v).max()) * max(1, n) ** 0.5


def test_chop_degree():
    b = make_basis(20)
    assert chop_degree(values_to_coeffs(fit_interpolation(lambda t: 4.0, b)), 1e-10) == 0
    cubic = fit_interpolation(lambda t: 0.3 * t ** 3 - t + 2, b)
    assert chop_degree(values_to_coeffs(cubic), 1e-10) == 3
    noise = np.random.default_rng(4).normal(size=(1, 21))
    assert chop_degree(noise, 1e-10) == 20
    assert chop_degree(np.zeros((2, 8)), 1e-10) == 0
    with pytest.raises(InvalidArgumentError):
        chop_degree(noise, 1.5)


def test_truncate_and_resample():
    b = make_basis(20, (0, 4))
    p = fit_interpolation(lambda t: [t ** 2, 1.0 - t], b)
    q = truncate(p, 2)
    assert q.degree == 2
    assert np.allclose(q.eval_many([0.3, 2.2]), p.eval_many([0.3, 2.2]), atol=1e-12)
    r = resample(q, 9)
    assert np.allclose(r.eval_many([1.1, 3.9]), q.eval_many([1.1, 3.9]), atol=1e-12)
    c = truncate(p, 0)
    assert np.allclose(c(1.0), c(3.0))


# derivatives -----------------------------------------------------------------

def test_derivatives():
    assert np.allclose(derivative(fit_interpolation(lambda t: 7.0, make_basis(4))).values, 0.0, atol=1e-12)
    d = derivative(fit_interpolation(lambda t: t, make_basis(3, (0, 2))))
    assert np.allclose(d.values, 1.0, atol=1e-12)
    p = fit_interpolation(np.sin, make_basis(20))
    xs = np.random.default_rng(5).uniform(-1, 1, 100)
    assert np.max(np.abs(derivative(p).eval_many(xs)[:, 0] - np.cos(xs))) < 1e-9
    q = fit_interpolation(lambda t: 3 * t * t - t, make_basis(2, (1, 5)))
    assert np.allclose(derivative(derivative(q)).values, 6.0, atol=1e-10)


def test_derivative_matches_numpy_on_scaled_domain():
    c = np.random.default_rng(6).normal(size=9)
    p = poly_from_coeffs(c, (2.0, 7.0))
    ts = np.linspace(2.0, 7.0, 33)
    ref = npcheb.chebval((2 * ts - 9.0) / 5.0, npcheb.chebder(c)) * (2.0 / 5.0)
    assert np.allclose(derivative(p).eval_many(ts)[:, 0], ref, atol=1e-10)


# Lie-valued polynomials --------------------------------------------------------------

def test_lie_poly_basics():
    anchor = Pose3.exp([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
    b = make_basis(4, (0, 2))
    zero = LiePoly(anchor, VecPoly(b, np.zeros((6, 5))))
    assert lie_eval(zero, 1.3).is_close(anchor)
    v = 0.7
    lin = LiePoly(Pose3.identity(), fit_interpolation(lambda t: [0, 0, 0, v * t, 0, 0], b))
    for t in (0.0, 0.5, 1.7):
        assert np.allclose(lie_eval(lin, t).translation, [v * t, 0, 0], atol=1e-12)
        assert np.allclose(lie_velocity(lin, t), [0, 0, 0, v, 0, 0], atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        LiePoly(anchor, VecPoly(b, np.zeros((3, 5))))


def test_lie_poly_roundtrip_on_smooth_trajectory():
    def truth(t):
        s = t / 30.0
        return Pose3.exp([0.8 * math.sin(2 * s), 0.5 * math.cos(3 * s) - 0.5, 0.6 * s,
                          math.sin(s), 0.2 * s * s, math.cos(4 * s)])

    b = make_basis(30, (0, 30))
    anchor = truth(0.0)
    tangent = VecPoly(b, np.stack([truth(t).ominus(anchor) for t in b.points], axis=1))
    p = LiePoly(anchor, tangent)
    ts = np.linspace(0, 30, 200)
    err = max(np.linalg.norm(truth(t).ominus(p(t))) for t in ts)
    assert err < 1e-6
    R, tr = lie_eval_many(p, ts)
    for k in (0, 77, 199):
        assert np.allclose(R[k], p(ts[k]).rotation.matrix, atol=1e-12)
        assert np.allclose(tr[k], p(ts[k]).translation, atol=1e-12)


def test_serialization_roundtrip():
    b = make_basis(5, (0.25, 1.75))
    v = VecPoly(b, np.random.default_rng(7).normal(size=(2, 6)))
    v2 = VecPoly.from_dict(json.loads(json.dumps(v.to_dict())))
    assert np.array_equal(v2.values, v.values) and v2.domain == v.domain
    lp = LiePoly(Pose3.exp([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), VecPoly(b, np.random.default_rng(8).normal(size=(6, 6))))
    lp2 = loads(dumps(lp))
    assert lp2(1.0).is_close(lp(1.0), 1e-14)
    d = lp.to_dict()
    assert {"degree", "domain", "dimension", "values", "anchor"} <= set(d)
