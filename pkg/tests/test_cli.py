import csv
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceilvo import cli
from ceilvo import dataset as ds


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Two seconds of the square at 10 fps, 424x240."""
    out = str(tmp_path_factory.mktemp("data") / "sq")
    assert cli.main(["sim", "--out", out, "--size", "424x240", "--fps", "10", "--duration", "2", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_run(tiny, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    assert cli.main(["run", tiny, "--out", out, "--size", "424x240", "--window", "5"]) == 0
    return out


def test_sim_layout(tiny):
    d = ds.open_dataset(tiny)
    assert len(d) == 21 and d.K.width == 424
    assert d.groundtruth() is not None


def test_run_writes_trajectory_and_log(tiny, tiny_run):
    tr = ds.read_trajectory(os.path.join(tiny_run, "trajectory.txt"))
    assert len(tr) == 21
    frames, summary = cli.read_runlog(os.path.join(tiny_run, "runlog.jsonl"))
    assert len(frames) == 21 and summary["keyframes"] == sum(f["keyframe"] for f in frames)


def test_run_is_deterministic(tiny, tiny_run, tmp_path):
    assert cli.main(["run", tiny, "--out", str(tmp_path), "--size", "424x240", "--window", "5"]) == 0
    a = open(os.path.join(tiny_run, "trajectory.txt"), "rb").read()
    assert a == (tmp_path / "trajectory.txt").read_bytes()


def test_eval_outputs(tiny, tiny_run, tmp_path):
    gt = os.path.join(tiny, "groundtruth.txt")
    est = os.path.join(tiny_run, "trajectory.txt")
    rc = cli.main(["eval", gt, est, "--runlog", os.path.join(tiny_run, "runlog.jsonl"),
                   "--plot", "--out", str(tmp_path)])
    assert rc == 0
    for name in ("errors.csv", "stats.csv", "binned.csv", "error_curve.svg", "error_box.svg"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "stats.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["q2"]) < 0.02 * 2.0
    assert float(row["kf_ratio"]) > 0
    with open(tmp_path / "errors.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) == int(row["n_pairs"])
    assert all(float(r[1]) >= 0 for r in rows)


def test_eval_at_lower_rate(tiny, tmp_path):
    out = str(tmp_path / "r")
    assert cli.main(["run", tiny, "--out", out, "--size", "424x240", "--fps", "5"]) == 0
    frames, _ = cli.read_runlog(os.path.join(out, "runlog.jsonl"))
    assert [f["index"] for f in frames] == list(range(0, 21, 2))


def test_sweep(tiny, tmp_path):
    rc = cli.main(["sweep", tiny, "--out", str(tmp_path), "--size", "424x240",
                   "--fps", "10", "--window", "5", "--plot"])
    assert rc == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert (tmp_path / "424x240_10fps_w5" / "error_curve.svg").exists()


def test_parallel_sweep_drops_timing(tiny, tmp_path):
    rc = cli.main(["sweep", tiny, "--out", str(tmp_path), "--size", "424x240",
                   "--fps", "10", "5", "--window", "5", "--parallel", "2"])
    assert rc == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["ok", "ok"]
    assert all(r["t_f_ms"] == "nan" and r["kappa"] == "nan" for r in rows)
    assert float(rows[0]["median"]) <= float(rows[1]["median"])


# ---- exit codes

def test_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["run"]) == 2
    assert cli.main(["run", str(tmp_path), "--out", str(tmp_path), "--size", "640x480"]) == 2
    assert cli.main(["run", str(tmp_path), "--out", str(tmp_path), "--window", "1"]) == 2
    assert cli.main(["run", str(tmp_path)]) == 2
    assert cli.main(["sim", "--out", str(tmp_path), "--fps", "0"]) == 2
    assert cli.main(["sim", "--out", str(tmp_path), "--speed", "9"]) == 2
    assert cli.main(["bogus"]) == 2
    assert cli.main(["sweep", str(tmp_path), "--out", str(tmp_path), "--parallel", "0"]) == 2


def test_data_errors(tiny, tmp_path):
    assert cli.main(["run", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 3
    # the tiny dataset cannot be upsampled to full size
    assert cli.main(["run", tiny, "--out", str(tmp_path)]) == 3
    gt = tmp_path / "gt.txt"
    gt.write_text("0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n2 1 1 0 0 0 0 1\n")
    far = tmp_path / "far.txt"
    far.write_text("50 0 0 0 0 0 0 1\n51 1 0 0 0 0 0 1\n")
    assert cli.main(["eval", str(gt), str(far), "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2 3\n")
    assert cli.main(["eval", str(gt), str(bad), "--out", str(tmp_path)]) == 3


def test_numerical_failure(tiny, tmp_path, monkeypatch):
    def boom(data, cfg, progress=None):
        raise cli.NumericalFailure("trajectory contains non-finite poses")
    monkeypatch.setattr(cli, "run_dataset", boom)
    assert cli.main(["run", tiny, "--out", str(tmp_path), "--size", "424x240"]) == 4


# ---- decimation

@settings(max_examples=100, deadline=None)
@given(st.floats(5, 60), st.floats(0.5, 30), st.integers(5, 200), st.floats(0, 0.2))
def test_decimation_within_half_source_period(src, fps, n, jitter):
    rng = np.random.default_rng(n)
    period = 1.0 / src
    times = np.arange(n) * period + rng.uniform(-jitter, jitter, n) * period
    times.sort()
    idx = cli.decimate(times, fps)
    assert len(set(idx.tolist())) == len(idx)
    assert np.all(np.diff(idx) > 0)
    sp = float(np.median(np.diff(times)))
    if 1.0 / fps <= sp:
        assert len(idx) == n
        return
    grid = times[0] + np.arange(len(times) * 10) / fps
    for k in idx:
        assert np.min(np.abs(grid - times[k])) < 0.5 * sp + 1e-12


def test_decimation_exact_rates():
    t = np.arange(300) / 30.0
    assert cli.decimate(t, 15).tolist() == list(range(0, 300, 2))
    assert cli.decimate(t, 3).tolist() == list(range(0, 300, 10))
    assert cli.decimate(t, 60).tolist() == list(range(300))
