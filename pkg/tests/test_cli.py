import json

import numpy as np
import pytest

from firecast.cli import main
from firecast.events import load_events_csv


@pytest.fixture
def params_file(tmp_path):
    payload = {
        "mu": [0.35, 0.3],
        "alpha": [[0.25, 0.1], [0.1, 0.2]],
        "beta": 1.0,
        "gamma": [0.7, 0.7],
        "mask": [[True, True], [True, True]],
    }
    path = tmp_path / "params.json"
    path.write_text(json.dumps(payload))
    return path


def test_simulate_fit_predict_eval_chain(tmp_path, params_file, capsys):
    events = tmp_path / "events.csv"
    assert main([
        "simulate", "--params", str(params_file), "--horizon", "150",
        "--seed", "3", "--out", str(events),
    ]) == 0
    seq = load_events_csv(events, horizon=150.0, num_locations=2)
    assert len(seq) > 20

    fitted = tmp_path / "fitted.json"
    trace = tmp_path / "trace.csv"
    assert main([
        "fit", "--events", str(events), "--horizon", "150", "--locations", "2",
        "--grid-points", "2", "--pgd-steps", "40", "--beta-low", "0.5",
        "--beta-high", "1.5", "--out", str(fitted), "--trace", str(trace),
    ]) == 0
    assert fitted.exists()
    lines = trace.read_text().strip().splitlines()
    assert lines[0] == "iter,objective" and len(lines) == 42

    detections = tmp_path / "det.csv"
    assert main([
        "predict", "--params", str(fitted), "--events", str(events),
        "--horizon", "150", "--locations", "2", "--out", str(detections),
    ]) == 0
    header = detections.read_text().splitlines()[0]
    assert header == "time,location,risk,threshold,prediction,truth"

    metrics = tmp_path / "metrics.csv"
    assert main(["eval", "--detections", str(detections), "--out", str(metrics)]) == 0
    assert metrics.read_text().splitlines()[0] == "location,precision,recall,f1"


def test_eval_counterfactual(tmp_path, params_file, capsys):
    events = tmp_path / "events.csv"
    main(["simulate", "--params", str(params_file), "--horizon", "80", "--out", str(events)])
    capsys.readouterr()
    assert main([
        "eval", "--counterfactual", "--params", str(params_file),
        "--events", str(events), "--horizon", "80", "--locations", "2",
        "--time", "40", "--location", "0", "--marks-a", "0.1,0.1",
        "--marks-b", "0.9,0.9",
    ]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["delta"] == pytest.approx(out["lambda_b"] - out["lambda_a"])


def test_conformal_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    path = tmp_path / "labeled.csv"
    with open(path, "w") as fh:
        fh.write("time,location,m_0,m_1,magnitude\n")
        for i in range(80):
            m0, m1 = rng.uniform(), rng.uniform()
            fh.write(f"{i + 0.5},0,{m0},{m1},{1 + int(m0 > 0.5)}\n")
    assert main([
        "conformal", "--data", str(path), "--horizon", "100", "--locations", "1",
        "--train-size", "50", "--num-bootstrap", "4", "--batch-size", "5",
        "--alphas", "0.1,0.2", "--seed", "1",
        "--sets", str(tmp_path / "sets.jsonl"), "--summary", str(tmp_path / "summary.csv"),
    ]) == 0
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0] == "alpha,coverage,mean_size,method"
    assert len(summary) == 3
    first = json.loads((tmp_path / "sets.jsonl").read_text().splitlines()[0])
    assert set(first) == {"index", "alpha", "set"}


def test_gridify_command(tmp_path):
    grid = {"lat_min": 0.0, "lon_min": 0.0, "lat_max": 1.0, "lon_max": 1.0, "cell_size": 0.5}
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps(grid))
    raw = tmp_path / "raw.csv"
    with open(raw, "w") as fh:
        fh.write("time,lat,lon,temp\n")
        fh.write("1.0,0.2,0.2,12.0\n")
        fh.write("2.0,0.8,0.9,14.0\n")
        fh.write("3.0,4.0,4.0,13.0\n")  # outside, dropped
    out = tmp_path / "events.csv"
    assert main(["gridify", "--raw", str(raw), "--grid", str(grid_path),
                 "--horizon", "5", "--out", str(out)]) == 0
    seq = load_events_csv(out, horizon=5.0, num_locations=4)
    assert len(seq) == 2


def test_run_command(tmp_path):
    bundle = {
        "seed": 2,
        "simulate": {
            "params": {
                "mu": [0.4],
                "alpha": [[0.2]],
                "beta": 1.0,
                "gamma": [1.0],
                "mask": [[True]],
            },
            "horizon": 100.0,
        },
        "fit": {"grid_points": 1, "pgd_steps": 30, "beta_low": 1.0, "beta_high": 1.0},
        "predict": {"screening": False},
    }
    cfg = tmp_path / "bundle.json"
    cfg.write_text(json.dumps(bundle))
    out_dir = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "manifest.json").exists()


def test_failures_exit_nonzero(tmp_path, capsys):
    rc = main(["fit", "--events", str(tmp_path / "missing.csv"), "--horizon", "10",
               "--locations", "1", "--out", str(tmp_path / "p.json")])
    assert rc == 1
    assert "firecast fit" in capsys.readouterr().err


def test_fit_with_precomputed_scores(tmp_path, params_file):
    events = tmp_path / "events.csv"
    main(["simulate", "--params", str(params_file), "--horizon", "120",
          "--seed", "4", "--out", str(events)])
    seq = load_events_csv(events, horizon=120.0, num_locations=2)
    scores = tmp_path / "scores.csv"
    with open(scores, "w") as fh:
        fh.write("time,location,score\n")
        for i in range(len(seq)):
            fh.write(f"{float(seq.times[i])!r},{int(seq.locations[i])},0.8\n")
    fitted = tmp_path / "fitted.json"
    assert main([
        "fit", "--events", str(events), "--horizon", "120", "--locations", "2",
        "--mark-model", "precomputed", "--scores", str(scores),
        "--grid-points", "1", "--pgd-steps", "30", "--beta-low", "1.0",
        "--beta-high", "1.0", "--out", str(fitted),
    ]) == 0
    assert fitted.exists()
