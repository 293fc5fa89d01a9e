import hashlib
import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from calibkit import cli
from calibkit.formats import FrameStream, parse_report, read_state, read_trace
from calibkit.simulator import DEFAULT_TRUE_STATE


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def config(tmp_path):
    def make(**sections):
        p = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.json"
        p.write_text(json.dumps(sections))
        return p

    return make


@pytest.fixture
def stream(tmp_path):
    p = tmp_path / "s.jsonl"
    assert run("simulate", "-o", p, "--frames", 40, "--seed", 3) == 0
    return p


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run("simulate", "-o", a, "--frames", 30, "--seed", 5, "--scene", "fast")
    run("simulate", "-o", b, "--frames", 30, "--seed", 5, "--scene", "fast")
    assert digest(a) == digest(b)
    run("simulate", "-o", b, "--frames", 30, "--seed", 6, "--scene", "fast")
    assert digest(a) != digest(b)


def test_simulate_video_length(tmp_path):
    p = tmp_path / "v.jsonl"
    assert run("simulate", "-o", p, "--frames", 1001, "--scene", "static") == 0
    assert sum(1 for _ in FrameStream(p)) == 1001


def test_simulate_disturbance_and_random_truth(tmp_path):
    p = tmp_path / "d.jsonl"
    run("simulate", "-o", p, "--frames", 60, "--disturbance", "high", "--random-truth", "--seed", 1)
    frames = list(FrameStream(p))
    moves = [f.index for f, g in zip(frames[1:], frames) if not np.array_equal(f.true_state, g.true_state)]
    assert moves == [25, 50]
    assert not np.allclose(frames[0].true_state, DEFAULT_TRUE_STATE)


def test_bad_q_length_exits_with_schema_error(stream, tmp_path, caplog):
    lines = stream.read_text().splitlines()
    doc = json.loads(lines[2])
    doc["q"] = doc["q"][:5]
    lines[2] = json.dumps(doc)
    stream.write_text("\n".join(lines) + "\n")
    with caplog.at_level(logging.ERROR, logger="calibkit"):
        assert run("calibrate", stream, "-o", tmp_path / "out", "--filter", "ekf") == 2
    assert "line 3" in caplog.text
    rep = parse_report(tmp_path / "out" / "report.csv")
    assert rep.error is not None and "line 3" in rep.error
    assert len(rep.rows) == 1


def test_init_recovers_truth_from_noiseless_frames(tmp_path, config):
    cfg = config(scene={"pixel_noise_sigma": 0.0, "outlier_count": 2, "dropout_probability": 0.0})
    s = tmp_path / "n.jsonl"
    run("simulate", "-o", s, "--frames", 10, "--config", cfg, "--random-truth", "--seed", 4)
    out = tmp_path / "init.json"
    assert run("init", s, "-n", 10, "-o", out, "--config", cfg) == 0
    x, P, info = read_state(out)
    truth = next(iter(FrameStream(s))).true_state
    np.testing.assert_allclose(x, truth, atol=1e-6)
    assert info["mode"] == "labels" and info["frames_used"] == 10
    assert np.linalg.eigvalsh(P).min() > 0


def test_init_clamps_frame_count(stream, tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="calibkit"):
        assert run("init", stream, "-n", 500, "-o", tmp_path / "i.json") == 0
    assert "only 40 frames" in caplog.text
    assert read_state(tmp_path / "i.json")[2]["frames_used"] == 40


def test_init_bootstraps_with_jcbb_without_labels(stream, tmp_path):
    stripped = tmp_path / "nolabels.jsonl"
    lines = stream.read_text().splitlines()
    out = [lines[0]]
    for raw in lines[1:]:
        d = json.loads(raw)
        d.pop("labels")
        d.pop("true_state")
        out.append(json.dumps(d))
    stripped.write_text("\n".join(out) + "\n")
    assert run("init", stripped, "-n", 20, "-o", tmp_path / "j.json") == 0
    x, _, info = read_state(tmp_path / "j.json")
    assert info["mode"] == "jcbb"
    np.testing.assert_allclose(x, DEFAULT_TRUE_STATE, atol=5e-3)
    assert run("init", stripped, "-o", tmp_path / "k.json", "--labels", "yes") == 2


def test_calibrate_outputs(stream, tmp_path):
    out = tmp_path / "run"
    assert run("calibrate", stream, "-o", out, "--filter", "aekf") == 0
    rep = parse_report(out / "report.csv")
    assert len(rep.rows) == 40 and rep.error is None
    assert all(r["assoc_time_ms"] is not None for r in rep.rows)
    assert all(r["n_pred"] <= r["n_pred_total"] for r in rep.rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["filter"] == "aekf" and summary["n_frames"] == 40 and summary["visibility"] is True
    assert 0.9 <= summary["association"]["precision"] <= 1.0
    frames, est, truth = read_trace(out / "trace.csv")
    assert len(frames) == 40
    np.testing.assert_allclose(est[-1], summary["final_state"])
    assert np.isfinite(truth).all()


def test_calibrate_without_visibility_keeps_all_predictions(stream, tmp_path):
    out = tmp_path / "nv"
    assert run("calibrate", stream, "-o", out, "--filter", "ekf", "--no-visibility") == 0
    rep = parse_report(out / "report.csv")
    assert all(r["n_pred"] == r["n_pred_total"] for r in rep.rows)
    assert json.loads((out / "summary.json").read_text())["visibility"] is False


def test_calibrate_pf_trace_reproducible(stream, tmp_path):
    for d in ("p1", "p2"):
        assert run("calibrate", stream, "-o", tmp_path / d, "--filter", "pf", "--seed", 7, "--no-timing") == 0
    for name in ("trace.csv", "report.csv", "summary.json"):
        assert digest(tmp_path / "p1" / name) == digest(tmp_path / "p2" / name)
    rep = parse_report(tmp_path / "p1" / "report.csv")
    assert all(r["assoc_time_ms"] is None and r["filter_time_ms"] is None for r in rep.rows)


def test_calibrate_estimate_disturbance_and_pnp(stream, tmp_path):
    assert run("calibrate", stream, "-o", tmp_path / "k", "--filter", "ekf", "--disturbance", "low") == 0
    frames, est, _ = read_trace(tmp_path / "k" / "trace.csv")
    jump = np.abs(est[25] - est[24]).max()
    assert jump > 10 * np.abs(est[24] - est[23]).max()
    assert run("calibrate", stream, "-o", tmp_path / "pnp", "--filter", "pnp") == 0
    x = json.loads((tmp_path / "pnp" / "summary.json").read_text())["final_state"]
    np.testing.assert_allclose(x, DEFAULT_TRUE_STATE, atol=5e-3)


def test_calibrate_with_init_file(stream, tmp_path):
    run("init", stream, "-n", 10, "-o", tmp_path / "i.json")
    assert run("calibrate", stream, "-o", tmp_path / "r", "--filter", "ekf", "--init", tmp_path / "i.json") == 0


def test_bench_reports_split_times(stream, tmp_path):
    out = tmp_path / "b.json"
    assert run("bench", stream, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert set(doc["filters"]) == {"ekf", "aekf", "pf"}
    for entry in doc["filters"].values():
        assert {"assoc_ms", "filter_ms", "pipeline_ms", "frames_per_second"} <= set(entry)
    f = doc["filters"]
    assert f["pf"]["filter_ms"]["median"] > f["ekf"]["filter_ms"]["median"]
    assert f["aekf"]["mean_predictions"] < f["aekf"]["mean_predictions_before_pruning"]


def test_associate_dump(stream, tmp_path):
    out = tmp_path / "a.json"
    assert run("associate", stream, "--frame", 5, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert doc["frame"] == 5 and doc["state"] == [0.0] * 6
    assert 1 <= len(doc["visible_sides"]) <= 2
    assert len(doc["truth"]) == len(doc["observations"])
    assert run("associate", stream, "--frame", 999, "-o", out) == 2


def test_config_errors_exit_2(stream, tmp_path, config):
    assert run("calibrate", stream, "-o", tmp_path / "x", "--config", config(filter={"bogus": 1})) == 2
    assert run("simulate", "-o", tmp_path / "y.jsonl", "--config", config(scene={"name": "nowhere"})) == 2
    assert run("calibrate", stream, "-o", tmp_path / "z", "--config", config(filter={"forget_factor": 0.0})) == 2
    assert run("init", tmp_path / "missing.jsonl", "-o", tmp_path / "q.json") == 1


def test_log_level_from_environment(monkeypatch):
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    try:
        root.handlers[:] = []
        monkeypatch.setenv("CALIBKIT_LOG", "info")
        cli._setup_logging(False)
        assert root.level == logging.INFO
        root.handlers[:] = []
        cli._setup_logging(True)
        assert root.level == logging.DEBUG
        root.handlers[:] = []
        monkeypatch.setenv("CALIBKIT_LOG", "chatty")
        cli._setup_logging(False)
        assert root.level == logging.WARNING
    finally:
        root.handlers[:], lvl = saved
        root.setLevel(lvl)


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "calibkit.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "init", "calibrate", "bench", "associate"):
        assert cmd in out.stdout
    bad = subprocess.run([sys.executable, "-m", "calibkit.cli", "calibrate", "nofile", "-o", str(tmp_path), "--filter", "ukf"], capture_output=True, text=True)
    assert bad.returncode == 2
