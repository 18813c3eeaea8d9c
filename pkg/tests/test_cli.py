import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from lmkan.cli import main
from lmkan.model import Model, build_lmkan_student
from lmkan.layers import LmKanLayer, PrecondBlock
from lmkan.serialization import load_model, save_model

MINIMAL = {
    "teacher": {"in_dim": 4, "hidden_dim": 8, "depth": 2},
    "student": {"hidden_dim": 8, "G": 6},
    "phases": {"steps": [10, 20, 20, 50]},
    "optimizer": {"batch_size": 32, "lr": 0.003},
    "eval": {"samples": 1024},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def trained(tmp_path, capsys):
    cfg = write_cfg(tmp_path, MINIMAL)
    model, hist = tmp_path / "m.lmk", tmp_path / "h.csv"
    code, out, _ = run(["train", cfg, "--model-out", model, "--history", hist], capsys)
    assert code == 0
    return cfg, model, hist, out


def test_train_writes_files(trained):
    _, model, hist, out = trained
    assert model.exists()
    rows = list(csv.DictReader(open(hist)))
    assert len(rows) == 100
    assert rows[0]["phase"] == "1" and rows[-1]["phase"] == "4"
    assert out.strip().splitlines()[-1].startswith("final_mse=")


def test_train_is_deterministic(trained, tmp_path, capsys):
    cfg, _, _, out = trained
    code, out2, _ = run(["train", cfg, "--model-out", tmp_path / "b.lmk", "--history", tmp_path / "b.csv"], capsys)
    assert code == 0
    final = [l for l in out.splitlines() if l.startswith("final_mse=")]
    assert final == [l for l in out2.splitlines() if l.startswith("final_mse=")]
    assert (tmp_path / "b.lmk").read_bytes() == (tmp_path / "m.lmk").read_bytes()


def test_eval_matches_train(trained, capsys):
    cfg, model, _, out = trained
    code, out2, _ = run(["eval", cfg, model], capsys)
    assert code == 0
    assert out2.strip().split("=")[1] == out.strip().splitlines()[-1].split("=")[1]


@pytest.mark.parametrize("edit,field", [
    ({"student": {"hidden_dim": 7}}, "student.hidden_dim"),
    ({"student": {"widht": 8}}, "student.widht"),
    ({"teacher": {"in_dim": 5}}, "teacher.in_dim"),
    ({"optimizer": {"momentum": 0.9}}, "optimizer.momentum"),
    ({"phases": {"steps": [1, 2]}}, "phases.steps"),
    ({"io": {"dtype": "f16"}}, "io.dtype"),
])
def test_bad_config_exit_2(edit, field, tmp_path, capsys):
    cfg = json.loads(json.dumps(MINIMAL))
    for sec, vals in edit.items():
        cfg.setdefault(sec, {}).update(vals)
    code, _, err = run(["train", write_cfg(tmp_path, cfg)], capsys)
    assert code == 2
    assert field in err


def test_unreadable_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["train", bad], capsys)[0] == 2
    assert run(["train", tmp_path / "missing.json"], capsys)[0] == 2
    assert run(["no-such-verb"], capsys)[0] == 2


def test_numeric_abort_exit_3(tmp_path, capsys):
    cfg = json.loads(json.dumps(MINIMAL))
    cfg["optimizer"]["lr"] = 1e300
    code, _, err = run(["train", write_cfg(tmp_path, cfg), "--model-out", tmp_path / "x.lmk"], capsys)
    assert code == 3
    assert "phase" in err
    assert not (tmp_path / "x.lmk").exists()


def test_fuse_and_inspect(trained, tmp_path, capsys):
    _, model, _, _ = trained
    fused = tmp_path / "f.lmk"
    code, out, _ = run(["fuse", model, fused], capsys)
    assert code == 0
    before, after = (int(t.split("=")[1]) for t in out.split())
    assert before == 3 * after // 2
    code, out, _ = run(["inspect", fused, "--json"], capsys)
    info = json.loads(out)
    assert [r["precond"] for r in info["layers"]] == ["none"] * 3
    assert info["totals"]["flops"] == after
    rng = np.random.default_rng(0)
    X = rng.standard_normal((1000, 4))
    assert np.max(np.abs(load_model(fused).forward(X) - load_model(model).forward(X))) <= 1e-10
    # fusing again is a no-op
    code, _, _ = run(["fuse", fused, tmp_path / "g.lmk"], capsys)
    assert code == 0
    np.testing.assert_array_equal(load_model(tmp_path / "g.lmk").forward(X), load_model(fused).forward(X))


def test_fuse_odd_grid_exit_4(tmp_path, capsys):
    m = build_lmkan_student(4, 6, 1, 5, rng=np.random.default_rng(0))
    m.forward(np.random.default_rng(1).standard_normal((8, 4)), training=True)
    save_model(m, tmp_path / "odd.lmk")
    code, _, err = run(["fuse", tmp_path / "odd.lmk", tmp_path / "out.lmk"], capsys)
    assert code == 4 and "even" in err
    assert not (tmp_path / "out.lmk").exists()


def test_fuse_relu_last_partial_exit_4(tmp_path, capsys):
    m = build_lmkan_student(4, 6, 1, 4, precond="relu_last", rng=np.random.default_rng(0))
    m.forward(np.random.default_rng(1).standard_normal((8, 4)), training=True)
    save_model(m, tmp_path / "rl.lmk")
    code, _, err = run(["fuse", tmp_path / "rl.lmk", tmp_path / "out.lmk"], capsys)
    assert code == 4 and "warning" in err
    assert (tmp_path / "out.lmk").exists()


def test_inspect_ratio_and_rows(tmp_path, capsys):
    m = Model([
        PrecondBlock(LmKanLayer(4, 6, 20), mode="none"),
        PrecondBlock(LmKanLayer(6, 2, 20), mode="none"),
    ])
    save_model(m, tmp_path / "two.lmk")
    code, out, _ = run(["inspect", tmp_path / "two.lmk"], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 4
    assert lines[-1].startswith("total")
    assert lines[1].split("\t")[-1] == "220.5"
    info = json.loads(run(["inspect", tmp_path / "two.lmk", "--json"], capsys)[1])
    assert info["totals"] == {"layers": 2, "params": 441 * (2 * 6 + 3 * 2), "flops": 2 * (24 + 12)}


def test_bench_fields_stable(trained, capsys):
    _, model, _, _ = trained
    args = ["bench", model, "--batch-sizes", 64, 128, "--warmup", 1, "--timed", 3, "--format", "json"]
    a = json.loads(run(args, capsys)[1])
    b = json.loads(run(args, capsys)[1])
    assert [r["batch_size"] for r in a] == [64, 128]
    for ra, rb in zip(a, b):
        assert ra["flops"] == rb["flops"] and ra["params"] == rb["params"]
        assert ra["timed"] == 3 and len(ra["run_seconds"]) == 3 and ra["throughput"] > 0
    code, out, _ = run(["bench", model, "--batch-sizes", 32, "--warmup", 0, "--timed", 2], capsys)
    rows = list(csv.DictReader(out.splitlines()))
    assert code == 0 and rows[0]["batch_size"] == "32"


def test_sweep_grid(tmp_path, capsys):
    cfg = json.loads(json.dumps(MINIMAL))
    cfg["phases"]["steps"] = [2, 4, 4, 6]
    out_csv = tmp_path / "sweep.csv"
    code, _, _ = run(["sweep-grid", write_cfg(tmp_path, cfg), "--G", 4, 6, "--out", out_csv], capsys)
    rows = list(csv.DictReader(open(out_csv)))
    assert code == 0 and [r["G"] for r in rows] == ["4", "6"]
    assert all(np.isfinite(float(r["final_mse"])) for r in rows)
    assert run(["sweep-grid", write_cfg(tmp_path, cfg), "--G", 2], capsys)[0] == 2


def test_module_entry_point_and_threads_env(trained):
    _, model, _, _ = trained
    env = dict(os.environ, LMKAN_THREADS="1")
    res = subprocess.run([sys.executable, "-m", "lmkan", "inspect", str(model)],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0
    assert res.stdout.splitlines()[0].startswith("module")
