import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rcp import cli
from rcp.data_io import read_cloud, read_flow, read_motion, write_flow
from rcp.metrics import flow_metrics, reg_metrics
from rcp.solver import SolverConfig

SHARP_FLAGS = ["--sinkhorn-epsilon", "1e-3", "--tau", "0.1"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_metrics(text):
    return {k: float(v) for k, v in (line.split("=", 1) for line in text.splitlines() if "=" in line)}


@pytest.fixture
def pair30(tmp_path, capsys):
    d = tmp_path / "pair"
    code, _, _ = run(["synth", "--out-dir", d, "--rotation-min", 30, "--rotation-max", 30,
                      "--partial-fraction", 0, "--seed", 3], capsys)
    assert code == 0
    return d


# ---------------------------------------------------------------- config plumbing

def test_defaults_mirror_solver_config():
    cfg = cli.solver_config(cli.resolve(cli.build_parser().parse_args(["flow", "--src", "a", "--dst", "b", "--out", "c"])))
    ref = SolverConfig()
    for name in ("iterations", "k_omega", "bands", "tau_int", "sinkhorn_epsilon", "sinkhorn_iters",
                 "sinkhorn_tol", "early_stop", "early_stop_tol", "timing"):
        assert getattr(cfg, name) == getattr(ref, name)
    assert cfg.update_mode == ref.update_mode
    assert cfg.regularizer == ref.regularizer
    assert cfg.features == ref.features


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["flow", "--help"])
    out = capsys.readouterr().out
    assert "--sinkhorn-epsilon" in out and "(default: 0.03)" in out


def test_config_file_grammar_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\niterations = 12   # trailing\n\nupdate_mode=hard\nearly_stop = yes\n")
    args = cli.build_parser().parse_args(["flow", "--src", "a", "--dst", "b", "--out", "c",
                                          "--config", str(path), "--iterations", "3"])
    values = cli.resolve(args)
    assert values["iterations"] == 3
    assert values["update_mode"] == "hard"
    assert values["early_stop"] is True


@pytest.mark.parametrize("text,where", [
    ("iterations = 3\nbogus = 1\n", "line 2"),
    ("iterations 3\n", "line 1"),
    ("tau = fast\n", "line 1"),
    ("update_mode = soft\n", "line 1"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, where):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    code, _, err = run(["flow", "--src", "a.ply", "--dst", "b.ply", "--out", tmp_path / "f.csv", "--config", path], capsys)
    assert code == 2
    assert where in err


# ---------------------------------------------------------------- synth

def test_synth_files_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["synth", "--out-dir", tmp_path / name, "--seed", 7, "--points", 200], capsys)[0] == 0
    for f in ("src.ply", "dst.ply", "gt_motion.json", "gt_flow.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(read_cloud(tmp_path / "a" / "src.ply")) == 200 - 60


def test_synth_zero_spec_identity(tmp_path, capsys):
    d = tmp_path / "z"
    code, _, _ = run(["synth", "--out-dir", d, "--rotation-max", 0, "--translation-min", 0, "--translation-max", 0,
                      "--partial-fraction", 0], capsys)
    assert code == 0
    assert (d / "src.ply").read_bytes() == (d / "dst.ply").read_bytes()
    m = read_motion(d / "gt_motion.json")
    assert m.rotation.tolist() == [1.0, 0, 0, 0] and m.translation.tolist() == [0.0, 0, 0]


def test_synth_blobs(tmp_path, capsys):
    d = tmp_path / "scene"
    assert run(["synth", "--out-dir", d, "--blobs", 3, "--points", 64], capsys)[0] == 0
    assert sorted(p.name for p in d.iterdir()) == ["dst.ply", "gt_flow.csv", "src.ply"]
    assert read_flow(d / "gt_flow.csv").source_size == 192


# ---------------------------------------------------------------- flow

def test_flow_self_alignment(tmp_path, capsys):
    d = tmp_path / "s"
    run(["synth", "--out-dir", d, "--rotation-max", 0, "--translation-min", 0, "--translation-max", 0,
         "--partial-fraction", 0], capsys)
    write_flow(tmp_path / "zero.csv", read_flow(d / "gt_flow.csv"))
    code, out, _ = run(["flow", "--src", d / "src.ply", "--dst", d / "src.ply", "--out", tmp_path / "f.csv",
                        "--gt", tmp_path / "zero.csv", "--trace", tmp_path / "t.csv", *SHARP_FLAGS], capsys)
    assert code == 0
    assert parse_metrics(out)["epe3d"] < 1e-3
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 1 + 8


def test_flow_trace_rows_follow_iterations(tmp_path, capsys):
    d = tmp_path / "scene"
    run(["synth", "--out-dir", d, "--blobs", 2, "--points", 64], capsys)
    code, out, _ = run(["flow", "--src", d / "src.ply", "--dst", d / "dst.ply", "--out", tmp_path / "f.csv",
                        "--gt", d / "gt_flow.csv", "--trace", tmp_path / "t.csv", "--iterations", 14], capsys)
    assert code == 0
    assert set(parse_metrics(out)) == {"epe3d", "acc3ds", "acc3dr", "outliers3d"}
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 1 + 15


def test_missing_file_exit_2_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.ply"
    code, _, err = run(["flow", "--src", missing, "--dst", missing, "--out", tmp_path / "f.csv"], capsys)
    assert code == 2
    assert str(missing) in err


def test_numerical_failure_exit_3(tmp_path, capsys, monkeypatch):
    from rcp.errors import NumericalFailure

    def boom(*a, **k):
        raise NumericalFailure("non-finite flow", 2)
    monkeypatch.setattr(cli, "run_scene_flow", boom)
    d = tmp_path / "scene"
    run(["synth", "--out-dir", d, "--blobs", 1, "--points", 32], capsys)
    code, _, err = run(["flow", "--src", d / "src.ply", "--dst", d / "dst.ply", "--out", tmp_path / "f.csv"], capsys)
    assert code == 3 and "iteration 2" in err


# ---------------------------------------------------------------- register

def test_register_30_degrees(tmp_path, capsys, pair30):
    cfg = tmp_path / "reg.cfg"
    cfg.write_text("iterations = 20\ntau = 0.1\nearly_stop = true\n")
    code, out, _ = run(["register", "--src", pair30 / "src.ply", "--dst", pair30 / "dst.ply",
                        "--out", tmp_path / "m.json", "--gt", pair30 / "gt_motion.json",
                        "--config", cfg, "--trace", tmp_path / "t.csv"], capsys)
    assert code == 0
    assert parse_metrics(out)["error_r"] < 1.0
    rows = (tmp_path / "t.csv").read_text().splitlines()[1:]
    cost = [float(r.split(",")[1]) for r in rows]
    assert all(b <= a for a, b in zip(cost, cost[1:]))


def test_register_default_trace_cost_non_increasing(tmp_path, capsys, pair30):
    code, _, _ = run(["register", "--src", pair30 / "src.ply", "--dst", pair30 / "dst.ply",
                      "--out", tmp_path / "m.json", "--trace", tmp_path / "t.csv"], capsys)
    assert code == 0
    cost = [float(r.split(",")[1]) for r in (tmp_path / "t.csv").read_text().splitlines()[1:]]
    assert len(cost) == 8
    assert all(b <= a for a, b in zip(cost, cost[1:]))


# ---------------------------------------------------------------- eval

def test_eval_identity_and_library_agreement(tmp_path, capsys, pair30):
    gt = pair30 / "gt_motion.json"
    code, out, _ = run(["eval", "--pred", gt, "--gt", gt, "--task", "register"], capsys)
    assert code == 0
    assert parse_metrics(out) == {"error_r": 0.0, "error_t": 0.0, "mae_r": 0.0, "mae_t": 0.0}
    flow = pair30 / "gt_flow.csv"
    code, out, _ = run(["eval", "--pred", flow, "--gt", flow, "--task", "flow"], capsys)
    assert parse_metrics(out) == {"epe3d": 0.0, "acc3ds": 1.0, "acc3dr": 1.0, "outliers3d": 0.0}

    other = tmp_path / "o.json"
    other.write_text(json.dumps({"quat": [0.99, 0.1, 0.0, 0.0], "trans": [0.1, 0.2, 0.3]}))
    with pytest.warns(RuntimeWarning):
        code, out, _ = run(["eval", "--pred", other, "--gt", gt, "--task", "register"], capsys)
    with pytest.warns(RuntimeWarning):
        ref = reg_metrics(read_motion(other), read_motion(gt)).as_dict()
    assert out == "".join(f"{k}={v!r}\n" for k, v in ref.items())
    noisy = read_flow(flow).vectors + 0.01
    write_flow(tmp_path / "n.csv", type(read_flow(flow))(noisy))
    _, out, _ = run(["eval", "--pred", tmp_path / "n.csv", "--gt", flow, "--task", "flow"], capsys)
    ref = flow_metrics(read_flow(tmp_path / "n.csv"), read_flow(flow)).as_dict()
    assert out == "".join(f"{k}={v!r}\n" for k, v in ref.items())


def test_eval_malformed_csv_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("index,dx,dy,dz\n0,1,2\n")
    code, _, err = run(["eval", "--pred", bad, "--gt", bad, "--task", "flow"], capsys)
    assert code == 2 and "line 2" in err


def test_eval_length_mismatch_exit_2(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("index,dx,dy,dz\n0,1,2,3\n")
    b.write_text("index,dx,dy,dz\n0,1,2,3\n1,1,2,3\n")
    assert run(["eval", "--pred", a, "--gt", b, "--task", "flow"], capsys)[0] == 2


# ---------------------------------------------------------------- bench

SUITE = {
    "cases": [
        {"name": "scene", "task": "flow", "points": 64, "objects": 2, "seed": 1},
        {"name": "shape", "task": "register", "points": 128, "seed": 2, "rotation_max": 20, "partial_fraction": 0},
    ],
    "configs": [{"name": f"K{k}", "set": {"iterations": k}} for k in (1, 3, 7)],
}


def test_bench_report_and_thread_independence(tmp_path, capsys, monkeypatch):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps(SUITE))
    reports = []
    for threads in ("1", "4"):
        monkeypatch.setenv("RCP_THREADS", threads)
        out = tmp_path / f"r{threads}.csv"
        assert run(["bench", "--suite", suite, "--out", out], capsys)[0] == 0
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]
    lines = reports[0].decode().splitlines()
    assert lines[0] == ",".join(cli.REPORT_COLUMNS)
    assert [l.split(",")[:2] for l in lines[1:]] == [[c["name"], f["name"]] for c in SUITE["cases"] for f in SUITE["configs"]]
    flow_rows = [l.split(",") for l in lines[1:4]]
    epe = [float(r[4]) for r in flow_rows]
    assert epe[2] <= epe[0]
    assert all(r[-1] == "" for r in flow_rows)


def test_bench_empty_suite(tmp_path, capsys):
    suite = tmp_path / "empty.json"
    suite.write_text('{"cases": []}')
    assert run(["bench", "--suite", suite, "--out", tmp_path / "r.csv"], capsys)[0] == 0
    assert (tmp_path / "r.csv").read_text() == ",".join(cli.REPORT_COLUMNS) + "\n"


@pytest.mark.parametrize("doc", ['{"cases": [{"name": "x", "colour": 1}]}', '{"cases": [{"task": "segment"}]}',
                                 '{"configs": [{"name": "c", "set": {"speed": 1}}]}', "[1, 2"])
def test_bench_bad_suite_exit_2(tmp_path, capsys, doc):
    suite = tmp_path / "bad.json"
    suite.write_text(doc)
    assert run(["bench", "--suite", suite, "--out", tmp_path / "r.csv"], capsys)[0] == 2


def test_bad_thread_count(tmp_path, capsys, monkeypatch):
    suite = tmp_path / "s.json"
    suite.write_text('{"cases": []}')
    monkeypatch.setenv("RCP_THREADS", "-2")
    assert run(["bench", "--suite", suite, "--out", tmp_path / "r.csv"], capsys)[0] == 2


def test_console_entry_point(tmp_path):
    env = dict(os.environ)
    out = subprocess.run([sys.executable, "-m", "rcp.cli", "eval", "--pred", tmp_path / "x.csv", "--gt",
                          tmp_path / "x.csv", "--task", "flow"], capture_output=True, text=True, env=env)
    assert out.returncode == 2
    assert "x.csv" in out.stderr
