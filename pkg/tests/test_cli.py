import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tensegrity_fg.cli import main
from tensegrity_fg.datasets import load_frames


@pytest.fixture(scope="module")
def zero_noise(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"n_trajectories": 2, "duration": 3.0, "endcap_sigma": 0.0,
                               "cable_sigma": 0.0, "seed": 4}))
    assert main(["simulate", "--config", str(cfg), "--out", str(d / "data")]) == 0
    return d


def test_simulate_outputs(zero_noise):
    data = zero_noise / "data"
    names = sorted(p.name for p in data.iterdir())
    assert names == ["frames_000.jsonl", "frames_001.jsonl", "geom.json", "gt_000.jsonl", "gt_001.jsonl",
                     "sim_config.json"]
    frames = list(load_frames(data / "frames_000.jsonl"))
    assert len(frames) == 91 and all(f.counts() == (6, 9, 0) for f in frames)
    geom = json.loads((data / "geom.json").read_text())
    assert set(geom) == {"geometry", "noise"}


def test_zero_noise_fit_and_evaluate(zero_noise, tmp_path):
    data = zero_noise / "data"
    traj = tmp_path / "traj.json"
    assert main(["fit", "--in", str(data / "frames_000.jsonl"), "--geom", str(data / "geom.json"),
                 "--out", str(traj)]) == 0
    doc = json.loads(traj.read_text())
    assert doc["manifest"]["degree_report"]["selected"] >= 2
    out = tmp_path / "metrics.json"
    assert main(["evaluate", "--est", str(traj), "--gt", str(data / "gt_000.jsonl"),
                 "--geom", str(data / "geom.json"), "--out", str(out), "--plots-csv", str(tmp_path / "plots")]) == 0
    m = json.loads(out.read_text())
    for key in ("center_of_mass_error", "translation_error", "rotation_error"):
        assert m[key] < 1e-3
    assert m["fit_error"]["summary"] < 1e-3
    assert (tmp_path / "plots" / "errors.csv").exists()

    samples = tmp_path / "s.csv"
    assert main(["sample", "--traj", str(traj), "--rate", "50", "--out", str(samples)]) == 0
    rows = list(csv.reader(samples.open()))
    assert len(rows[0]) == 1 + 3 * 13 and len(rows) == 1 + 151


def test_estimate_and_evaluate_states(zero_noise, tmp_path):
    data = zero_noise / "data"
    states = tmp_path / "states.jsonl"
    assert main(["estimate", "--in", str(data / "frames_001.jsonl"), "--geom", str(data / "geom.json"),
                 "--out", str(states), "--diagnostics"]) == 0
    lines = states.read_text().splitlines()
    assert len(lines) == 91
    rec = json.loads(lines[0])
    assert set(rec) >= {"t", "poses", "cost", "hypothesis", "low_confidence", "converged", "factor_costs"}
    out = tmp_path / "m.json"
    assert main(["evaluate", "--est", str(states), "--gt", str(data / "gt_001.jsonl"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["center_of_mass_error"] < 1e-3


def test_missing_geometry_is_usage_error(zero_noise, tmp_path, capsys):
    code = main(["estimate", "--in", str(zero_noise / "data" / "frames_000.jsonl"),
                 "--geom", str(tmp_path / "nope.json"), "--out", str(tmp_path / "s.jsonl")])
    assert code == 2
    assert "geometry file not found" in capsys.readouterr().err


def test_bad_arguments_are_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["fit", "--out", "x"]) == 2
    assert main(["bogus"]) == 2


def test_mismatched_domain_is_data_error(zero_noise, tmp_path):
    data = zero_noise / "data"
    short = tmp_path / "short"
    assert main(["simulate", "--out", str(short), "--n-trajectories", "1", "--duration", "1.0",
                 "--endcap-sigma", "0", "--cable-sigma", "0", "--seed", "4"]) == 0
    traj = tmp_path / "traj.json"
    assert main(["fit", "--in", str(short / "frames_000.jsonl"), "--out", str(traj)]) == 0
    code = main(["evaluate", "--est", str(traj), "--gt", str(data / "gt_000.jsonl"), "--out", str(tmp_path / "m.json")])
    assert code == 3


def test_malformed_frames_are_data_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"t": 0, "cables": [{"sensor_id": 1, "length": 0.2}, {"sensor_id": 1, "length": 0.2}]}\n')
    assert main(["estimate", "--in", str(bad), "--out", str(tmp_path / "s.jsonl")]) == 3


def test_cluster_command(tmp_path):
    rng = np.random.default_rng(0)
    rows = [list(p) + [255, 0, 0] for p in rng.normal(0, 0.003, (20, 3))]
    rows += [list(p) + [0, 0, 255] for p in rng.normal(1, 0.003, (20, 3))]
    src = tmp_path / "cloud.csv"
    src.write_text("\n".join(",".join(map(str, r)) for r in rows) + "\n")
    out = tmp_path / "c.json"
    assert main(["cluster", "--in", str(src), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert len(d["red"]) == 1 and len(d["blue"]) == 1 and d["green"] == []
    assert d["red"][0]["count"] == 20


def test_deterministic_outputs(tmp_path):
    args = ["--n-trajectories", "1", "--duration", "2.0", "--p-miss", "0.2", "--spurious", "1", "--seed", "9"]
    assert main(["simulate", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["simulate", "--out", str(tmp_path / "b")] + args) == 0
    for name in ("frames_000.jsonl", "gt_000.jsonl", "geom.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    outs = []
    for k in "ab":
        p = tmp_path / f"s_{k}.jsonl"
        assert main(["estimate", "--in", str(tmp_path / k / "frames_000.jsonl"),
                     "--geom", str(tmp_path / k / "geom.json"), "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "tensegrity_fg", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
