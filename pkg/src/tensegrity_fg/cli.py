"""Command line entry point: ``tensegrity-fg <subcommand>``.

Exit codes: 0 success, 2 usage or missing input, 3 malformed or misaligned
data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from .errors import (
    AlignmentError,
    DegenerateAxisError,
    FitError,
    FrameRejectedError,
    GenerationError,
    InitializationError,
    InvalidArgumentError,
    LinearizationError,
    ParseError,
    SequenceError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (ParseError, SequenceError, AlignmentError, InvalidArgumentError,
                json.JSONDecodeError, KeyError)
_NUMERIC_ERRORS = (FitError, LinearizationError, DegenerateAxisError, GenerationError,
                   InitializationError, FrameRejectedError, FloatingPointError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


def _require_file(path, what):
    if path is not None and not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _load_geometry(path):
    from .factors import NoiseConfig, RobotGeometry, load_config

    if path is None:
        return RobotGeometry(), NoiseConfig()
    _require_file(path, "geometry file")
    return load_config(path)


def _write_json(path, obj):
    from .datasets import dumps

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dumps(obj) + "\n")


# subcommands -----------------------------------------------------------------

def cmd_simulate(args):
    from .datasets import write_frames, write_ground_truth
    from .factors import NoiseConfig, RobotGeometry, dump_config
    from .simgen import SimConfig, generate_trajectory, sample_observations

    settings, geom = {}, RobotGeometry()
    if args.config is not None:
        _require_file(args.config, "config file")
        with open(args.config) as fh:
            settings = json.load(fh)
        if "geometry" in settings:
            geom = RobotGeometry.from_dict(settings.pop("geometry"))
    for name in ("n_trajectories", "duration", "obs_rate", "endcap_sigma", "cable_sigma",
                 "p_miss", "spurious_per_frame", "seed"):
        value = getattr(args, name)
        if value is not None:
            settings[name] = value
    cfg = SimConfig.from_dict(settings)
    os.makedirs(args.out, exist_ok=True)
    for k in range(cfg.n_trajectories):
        seed = cfg.seed + k
        gt = generate_trajectory(cfg, seed=seed, geom=geom)
        frames = sample_observations(gt, cfg, seed=seed)
        write_frames(frames, os.path.join(args.out, f"frames_{k:03d}.jsonl"))
        write_ground_truth(gt, os.path.join(args.out, f"gt_{k:03d}.jsonl"))
    noise = NoiseConfig(endcap_sigma=max(cfg.endcap_sigma, NoiseConfig().endcap_sigma),
                        cable_sigma=max(cfg.cable_sigma, NoiseConfig().cable_sigma))
    _write_json(os.path.join(args.out, "geom.json"), dump_config(geom, noise))
    _write_json(os.path.join(args.out, "sim_config.json"), cfg.to_dict())
    print(f"wrote {cfg.n_trajectories} trajectories to {args.out}")


def cmd_cluster(args):
    from .clustering import cluster_point_cloud, read_point_cloud_csv

    _require_file(args.inp, "point cloud")
    points = read_point_cloud_csv(args.inp)
    result = cluster_point_cloud(points, alpha=args.alpha, dof=3)
    out = {
        color.name.lower(): [
            {"mean": c.mean.tolist(), "covariance": c.covariance.tolist(), "count": c.count}
            for c in clusters
        ]
        for color, clusters in result.items()
    }
    _write_json(args.out, out)
    print(", ".join(f"{k}: {len(v)}" for k, v in out.items()))


def cmd_estimate(args):
    from .datasets import load_frames
    from .estimator import EstimatorConfig, run_sequence, write_estimates

    _require_file(args.inp, "frames file")
    geom, noise = _load_geometry(args.geom)
    config = EstimatorConfig(noise=noise, selection=args.selection)
    rejected = []
    estimates = run_sequence(load_frames(args.inp, raw=args.raw), geom, config,
                             on_reject=lambda frame, exc: rejected.append(frame.timestamp))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        write_estimates(estimates, fh, diagnostics=args.diagnostics)
    low = sum(e.low_confidence for e in estimates)
    print(f"{len(estimates)} estimates, {low} low-confidence, {len(rejected)} rejected frames")


def cmd_fit(args):
    from .datasets import load_frames
    from .trajectory import (
        TrajectoryData,
        degree_search,
        fit_bar_polys,
        fit_endcap_polys,
        label_frames,
        trajectory_document,
    )
    from .estimator import EstimatorConfig

    _require_file(args.inp, "frames file")
    geom, noise = _load_geometry(args.geom)
    frames = list(load_frames(args.inp))
    if any(e.label is None for f in frames for e in f.endcap_points):
        frames = label_frames(frames, geom, config=EstimatorConfig(noise=noise))
    data = TrajectoryData.from_frames(frames)
    if args.degree is not None:
        endcaps, report = fit_endcap_polys(data, geom, args.degree, noise), None
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            endcaps, report = degree_search(data, geom, split_fraction=args.split, noise=noise)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    bars = fit_bar_polys(endcaps, geom)
    _write_json(args.out, trajectory_document(endcaps, bars, geom, report))
    chosen = endcaps.degree if report is None else report.selected
    print(f"degree {chosen}, domain [{bars.domain[0]}, {bars.domain[1]}]")


def cmd_sample(args):
    from .datasets import _num
    from .factors import BAR_TO_COLOR, BARS
    from .trajectory import load_trajectory_document, query

    _require_file(args.traj, "trajectory file")
    if not args.rate > 0:
        raise UsageError("--rate must be positive")
    with open(args.traj) as fh:
        _, bars, _ = load_trajectory_document(json.load(fh))
    lo, hi = bars.domain
    n = int(np.floor((hi - lo) * args.rate + 1e-9)) + 1
    times = lo + np.arange(n) / args.rate
    header = ["t"]
    for b in BARS:
        c = BAR_TO_COLOR[b]
        header += [f"{c}_{k}" for k in ("qw", "qx", "qy", "qz", "x", "y", "z")]
        header += [f"{c}_v{k}" for k in range(6)]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t in times:
            poses, twists = query(bars, float(min(t, hi)))
            row = [float(t)]
            for b in BARS:
                row += list(poses[b].rotation.quaternion) + list(poses[b].translation) + list(twists[b])
            fh.write(",".join(_num(v) for v in row) + "\n")
    print(f"{n} samples written to {args.out}")


def _read_estimate_input(path):
    """A trajectory document (single JSON object) or a states JSONL file."""
    from .estimator import read_estimates
    from .trajectory import load_trajectory_document

    with open(path) as fh:
        text = fh.read()
    stripped = text.strip()
    if not stripped:
        raise ParseError("estimate file is empty", line=0)
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and "bars" in doc:
        return load_trajectory_document(doc)[1]
    try:
        return read_estimates(text.splitlines())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"cannot read estimates: {exc}", line=0) from None


def cmd_evaluate(args):
    from .datasets import compute_metrics, load_ground_truth
    from .simgen import evaluate_fit

    _require_file(args.est, "estimate file")
    _require_file(args.gt, "ground-truth file")
    geom, _ = _load_geometry(args.geom)
    est = _read_estimate_input(args.est)
    gt = load_ground_truth(args.gt, geom)
    out = {}
    if hasattr(est, "bars"):
        out["fit_error"] = evaluate_fit(gt, est).to_dict()
    report = compute_metrics(est, gt, geom)
    out.update(report.to_dict())
    _write_json(args.out, out)
    if args.plots_csv:
        os.makedirs(args.plots_csv, exist_ok=True)
        report.write_csv(os.path.join(args.plots_csv, "errors.csv"))
    print(f"center of mass {report.center_of_mass:.6g} m, translation {report.translation:.6g} m, "
          f"rotation {report.rotation:.6g} rad")


# parser ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tensegrity-fg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic datasets with ground truth")
    s.add_argument("--config", help="SimConfig JSON (optionally with a 'geometry' entry)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-trajectories", dest="n_trajectories", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--obs-rate", dest="obs_rate", type=float)
    s.add_argument("--endcap-sigma", dest="endcap_sigma", type=float)
    s.add_argument("--cable-sigma", dest="cable_sigma", type=float)
    s.add_argument("--p-miss", dest="p_miss", type=float)
    s.add_argument("--spurious", dest="spurious_per_frame", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("cluster", help="cluster a coloured point cloud CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("estimate", help="online per-frame pose estimation")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--geom")
    s.add_argument("--out", required=True)
    s.add_argument("--diagnostics", action="store_true")
    s.add_argument("--raw", action="store_true", help="cluster raw point clouds per frame")
    s.add_argument("--selection", choices=("penalized", "per_dimension"), default="penalized")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("fit", help="Chebyshev trajectory fit with degree search")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--geom")
    s.add_argument("--out", required=True)
    s.add_argument("--split", type=float, default=0.2)
    s.add_argument("--degree", type=int, help="fixed degree, skipping the search")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("sample", help="sample a fitted trajectory to CSV")
    s.add_argument("--traj", required=True)
    s.add_argument("--rate", type=float, default=200.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="error metrics against ground truth")
    s.add_argument("--est", required=True, help="states JSONL or trajectory JSON")
    s.add_argument("--gt", required=True)
    s.add_argument("--geom")
    s.add_argument("--out", required=True)
    s.add_argument("--plots-csv", dest="plots_csv")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
