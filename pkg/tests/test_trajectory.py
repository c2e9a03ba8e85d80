import json

import numpy as np
import pytest
from numpy.polynomial import chebyshev as npcheb

from helpers import make_frame, random_poses
from tensegrity_fg.chebyshev import VecPoly, make_basis
from tensegrity_fg.errors import DegenerateAxisError, InvalidArgumentError, RankDeficiencyError
from tensegrity_fg.factors import BARS, RobotGeometry
from tensegrity_fg.liegroup import Pose3
from tensegrity_fg.simgen import ENDCAP_ORDER, SimConfig, evaluate_fit, generate_trajectory, sample_observations
from tensegrity_fg.trajectory import (
    DegreeSearchWarning,
    EndcapPolySet,
    TrajectoryData,
    degree_search,
    fit_bar_polys,
    fit_endcap_polys,
    label_frames,
    load_trajectory_document,
    query,
    trajectory_document,
)

GEOM = RobotGeometry()


@pytest.fixture(scope="module")
def sim():
    cfg = SimConfig(duration=30.0, endcap_sigma=0.0, cable_sigma=0.0, seed=3)
    gt = generate_trajectory(cfg)
    return gt, sample_observations(gt, cfg)


@pytest.fixture(scope="module")
def sim_fit(sim):
    gt, frames = sim
    endcaps = fit_endcap_polys(frames, GEOM, degree=40)
    return endcaps, fit_bar_polys(endcaps, GEOM)


def max_endcap_error(endcaps, gt):
    return max(np.abs(endcaps.polys[k].eval_many(gt.timestamps) - gt.endcaps[:, i]).max()
               for i, k in enumerate(ENDCAP_ORDER))


def constant_endcaps(positions, domain=(0.0, 1.0), degree=3):
    basis = make_basis(degree, domain)
    return EndcapPolySet({k: VecPoly(basis, np.repeat(np.asarray(positions[k], float)[:, None], basis.size, axis=1))
                          for k in ENDCAP_ORDER})


def translating_frames(poly_coeffs, n=200, duration=2.0, occlude=(), cables=True):
    """Rigid prism translated by a Chebyshev polynomial displacement."""
    base = GEOM.nominal_poses()
    frames = []
    for t in np.linspace(0, duration, n):
        s = 2 * t / duration - 1
        d = np.array([npcheb.chebval(s, c) for c in poly_coeffs])
        poses = {b: Pose3(p.rotation, p.translation + d) for b, p in base.items()}
        frames.append(make_frame(poses, t=float(t), drop=occlude, cables=cables))
    return frames


# endcap fitting -----------------------------------------------------------------

def test_noiseless_sim_degree_40(sim, sim_fit):
    gt, _ = sim
    endcaps, _ = sim_fit
    assert max_endcap_error(endcaps, gt) < 2e-3


def test_occluded_endcap_without_cables_is_rank_deficient():
    frames = translating_frames([[0, 0.1, 0.02], [0, 0.05], [0.0]], n=60, occlude=[("G", "B")], cables=False)
    with pytest.raises(RankDeficiencyError) as info:
        fit_endcap_polys(frames, GEOM, degree=5)
    assert info.value.starved == "GB"
    assert "GB" in str(info.value)


def test_occluded_endcap_recovered_through_cables(sim):
    gt, frames = sim
    hidden = [type(f)(f.timestamp, [e for e in f.endcap_points if not (e.color == "green" and e.label == "B")],
                      f.cable_lengths, f.bar_points, f.dt_since_prev) for f in frames]
    endcaps = fit_endcap_polys(hidden, GEOM, degree=40)
    k = ENDCAP_ORDER.index(("G", "B"))
    err = np.abs(endcaps.polys[("G", "B")].eval_many(gt.timestamps) - gt.endcaps[:, k]).max()
    assert err < 0.02


def test_unlabelled_frames_need_labels(sim):
    _, frames = sim
    raw = [type(f)(f.timestamp, [type(e)(e.color, e.position) for e in f.endcap_points], f.cable_lengths)
           for f in frames[:30]]
    with pytest.raises(InvalidArgumentError):
        TrajectoryData.from_frames(raw)
    labelled = label_frames(raw, GEOM)
    for a, b in zip(labelled, frames[:30]):
        assert sorted((e.color, e.label) for e in a.endcap_points) == sorted((e.color, e.label) for e in b.endcap_points)


# degree search ----------------------------------------------------------------

def test_degree_search_finds_polynomial_degree():
    rng = np.random.default_rng(0)
    coeffs = [rng.normal(0, 0.05, 11) / (np.arange(11) + 1) for _ in range(3)]
    endcaps, rep = degree_search(translating_frames(coeffs, n=300), GEOM)
    assert rep.selected >= 10
    test_rms = dict((d, te) for d, _, te in rep.tried)
    assert test_rms[rep.selected] < 1e-6
    # the stop rule: selected error is no worse than any earlier one, and the next did not improve
    assert all(test_rms[rep.selected] <= te for d, _, te in rep.tried if d <= rep.selected)
    if rep.tried[-1][0] > rep.selected:
        assert rep.tried[-1][2] >= test_rms[rep.selected]


def test_degree_search_initial_degree_from_test_size():
    frames = translating_frames([[0, 0.1], [0.0], [0.0]], n=20)
    _, rep = degree_search(frames, GEOM, split_fraction=0.2)
    assert rep.n_test == 4 and rep.n_train == 16
    assert rep.tried[0][0] == 2


def test_degree_search_stops_on_noise():
    rng = np.random.default_rng(1)
    base = random_poses(rng)
    frames = []
    for t in np.linspace(0, 5, 200):
        f = make_frame(base, t=float(t), cables=False, endcap_sigma=0.01, rng=rng)
        frames.append(f)
    _, rep = degree_search(frames, GEOM)
    assert rep.selected == rep.tried[0][0]
    assert len(rep.tried) == 2


def test_degree_search_rejects_tiny_input():
    with pytest.raises(InvalidArgumentError):
        degree_search(translating_frames([[0.0]], n=10), GEOM)


def test_degree_search_reduces_infeasible_initial_degree():
    frames = translating_frames([[0, 0.1], [0.0], [0.0]], n=40)
    with pytest.warns(DegreeSearchWarning):
        _, rep = degree_search(frames, GEOM, initial_degree=100)
    assert rep.tried[0][0] < 100


# bar polynomials ----------------------------------------------------------------

def test_constant_endcaps_give_identity_bar():
    pos = {k: np.zeros(3) for k in ENDCAP_ORDER}
    for b in BARS:
        pos[(b, "A")] = np.array([0, 0, 0.1625])
        pos[(b, "B")] = np.array([0, 0, -0.1625])
    bars = fit_bar_polys(constant_endcaps(pos), GEOM)
    for b in BARS:
        assert bars.chopped_degrees[b] == 0
        for t in (0.0, 0.37, 1.0):
            assert bars.bars[b](t).is_close(Pose3.identity(), 1e-12)


def test_translating_endcaps_give_linear_bar():
    v = np.array([0.3, -0.1, 0.2])
    basis = make_basis(4, (0.0, 2.0))
    polys = {}
    for b in BARS:
        for e, z in (("A", 0.1625), ("B", -0.1625)):
            start = np.array([BARS.index(b), 0.0, z])
            polys[(b, e)] = VecPoly(basis, (start[:, None] + v[:, None] * basis.points[None, :]))
    bars = fit_bar_polys(EndcapPolySet(polys), GEOM)
    for b in BARS:
        assert bars.chopped_degrees[b] == 1
        poses, twists = query(bars, 0.7)
        assert np.allclose(poses[b].rotation.matrix, np.eye(3), atol=1e-12)
        assert np.allclose(twists[b][:3], 0, atol=1e-9)
        assert np.allclose(twists[b][3:], v, atol=1e-9)


def test_coincident_endcaps_raise_with_time():
    pos = {k: np.zeros(3) for k in ENDCAP_ORDER}
    with pytest.raises(DegenerateAxisError) as info:
        fit_bar_polys(constant_endcaps(pos), GEOM)
    assert info.value.time is not None


def test_bar_axis_matches_endcap_difference(sim_fit):
    endcaps, bars = sim_fit
    rng = np.random.default_rng(2)
    lo, hi = bars.domain
    for t in rng.uniform(lo, hi, 500):
        for b in BARS:
            axis = bars.bars[b](t).rotation.matrix[:, 2]
            d = endcaps.polys[(b, "A")](t) - endcaps.polys[(b, "B")](t)
            ang = np.arccos(np.clip(axis @ d / np.linalg.norm(d), -1, 1))
            assert ang < 1e-3


def test_bar_poly_matches_ground_truth(sim, sim_fit):
    gt, _ = sim
    _, bars = sim_fit
    assert evaluate_fit(gt, bars).summary < 1e-3


def test_rigid_length_by_construction(sim_fit):
    _, bars = sim_fit
    for t in np.linspace(*bars.domain, 50):
        for b in BARS:
            X = bars.bars[b](t)
            d = GEOM.endcap_position(X, "A") - GEOM.endcap_position(X, "B")
            assert abs(np.linalg.norm(d) - GEOM.bar_length) < 1e-12
    assert bars.length_violation >= 0


def test_evaluation_rate_independence(sim_fit):
    _, bars = sim_fit
    lo, hi = bars.domain
    fast = np.arange(0, 200 * (hi - lo) + 1) / 200 + lo
    slow = fast[::20]
    for b in BARS:
        a = bars.bars[b].tangent.eval_many(fast)[::20]
        s = bars.bars[b].tangent.eval_many(slow)
        assert np.array_equal(a, s)


def test_chopping_error_bound(sim_fit):
    endcaps, _ = sim_fit
    tol = 1e-6
    full = fit_bar_polys(endcaps, GEOM, chop_tol=1e-15)
    chopped = fit_bar_polys(endcaps, GEOM, chop_tol=tol)
    ts = np.linspace(*full.domain, 2000)
    for b in BARS:
        ref = full.bars[b].tangent.eval_many(ts)
        # both share an anchor, so tangent values are directly comparable
        assert full.bars[b].anchor.is_close(chopped.bars[b].anchor)
        dev = np.abs(chopped.bars[b].tangent.eval_many(ts) - ref).max()
        assert dev <= 10 * tol * np.abs(ref).max()


# queries ----------------------------------------------------------------------

def test_constant_trajectory_has_zero_velocity():
    pos = {k: np.zeros(3) for k in ENDCAP_ORDER}
    for i, b in enumerate(BARS):
        pos[(b, "A")] = np.array([i, 0.1, 0.1625])
        pos[(b, "B")] = np.array([i, -0.1, -0.1625])
    bars = fit_bar_polys(constant_endcaps(pos), GEOM)
    _, twists = query(bars, 0.5)
    assert all(np.allclose(twists[b], 0, atol=1e-12) for b in BARS)


def test_velocity_matches_finite_difference(sim_fit):
    _, bars = sim_fit
    h = 1e-4
    rng = np.random.default_rng(3)
    lo, hi = bars.domain
    for t in rng.uniform(lo + 1, hi - 1, 20):
        _, twists = query(bars, t)
        for b in BARS:
            p = bars.bars[b]
            fd = (p(t + h).ominus(p.anchor) - p(t - h).ominus(p.anchor)) / (2 * h)
            v = twists[b]
            assert np.linalg.norm(v - fd) <= 1e-4 * max(np.linalg.norm(v), 1e-3)


def test_query_outside_domain(sim_fit):
    _, bars = sim_fit
    with pytest.raises(Exception):
        query(bars, bars.domain[1] + 1.0)


# serialisation ----------------------------------------------------------------

def test_document_roundtrip(sim_fit):
    endcaps, bars = sim_fit
    doc = json.loads(json.dumps(trajectory_document(endcaps, bars, GEOM)))
    e2, b2, manifest = load_trajectory_document(doc)
    assert manifest["domain"] == list(bars.domain)
    assert len(manifest["geometry_hash"]) == 64
    t = 0.5 * sum(bars.domain)
    for b in BARS:
        assert b2.bars[b](t).is_close(bars.bars[b](t), 1e-12)
    for k in ENDCAP_ORDER:
        assert np.allclose(e2.polys[k](t), endcaps.polys[k](t), atol=1e-12)
