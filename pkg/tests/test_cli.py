from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ngo.cli import confidence_interval, main
from ngo.io import load_dataset, load_model

SMALL = {"basis": {"n": 6, "degree": 3}, "quadrature": {"cells": 8, "points": 4}}


def _run(tmp_path, verb, cfg, out="out", *extra):
    path = tmp_path / f"{verb}-{out}.json"
    path.write_text(json.dumps(cfg))
    return main([verb, "--config", str(path), "--out", str(tmp_path / out), *extra])


def _rows(path):
    return list(csv.DictReader(open(path)))


def test_generate_and_determinism(tmp_path):
    cfg = {"dataset": "C", "n": 10, "seed": 3}
    assert _run(tmp_path, "generate", cfg, "a") == 0
    assert _run(tmp_path, "generate", cfg, "b") == 0
    a = (tmp_path / "a" / "manifest.json").read_text()
    assert a == (tmp_path / "b" / "manifest.json").read_text()
    samples, man = load_dataset(tmp_path / "a")
    assert len(samples) == 10 and len(man["samples"]) == 10


def test_generate_F_records_alpha(tmp_path):
    assert _run(tmp_path, "generate", {"dataset": "F", "n": 2}) == 0
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert all(s["params"]["alpha"] == 0.1 for s in man["samples"])


def test_config_errors_exit_2(tmp_path):
    assert _run(tmp_path, "generate", {"dataset": "Z", "n": 2}) == 2
    assert _run(tmp_path, "precon-bench", {"solvers": [], "dataset": {"name": "C", "n": 1}}) == 2
    assert main(["eval", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


def test_numerical_failure_exits_3(tmp_path):
    cfg = {**SMALL, "dataset": {"name": "C", "n": 6}, "n_train": 4,
           "model": {"variant": "model", "hidden": [8], "neumann": False},
           "training": {"epochs": 3, "batch_size": 2, "learning_rate": 1e300}}
    with np.errstate(all="ignore"):
        assert _run(tmp_path, "train", cfg) == 3


def test_bench_nonconvergence_is_reported(tmp_path):
    cfg = {"dataset": {"name": "C", "n": 1}, "grid": 9, "preconditioners": ["none"], "solvers": ["Bi-CGSTAB"],
           "max_iter": 1, "tol": 1e-30}
    assert _run(tmp_path, "precon-bench", cfg) == 0
    bench = json.loads((tmp_path / "out" / "bench.json").read_text())
    assert bench["rows"][0]["all_converged"] is False


def test_train_resume_and_eval(tmp_path):
    data = {"name": "C", "n": 12, "seed": 5}
    cfg = {**SMALL, "dataset": data, "n_train": 8, "model": {"variant": "model", "hidden": [8]},
           "training": {"epochs": 5, "batch_size": 4}}
    assert _run(tmp_path, "train", cfg, "t1") == 0
    hist = _rows(tmp_path / "t1" / "history.csv")
    assert len(hist) == 5
    model, header = load_model(tmp_path / "t1" / "model")
    assert header["history"]["best_epoch"] == int(np.argmin([float(r["val_loss"]) for r in hist]))
    cfg2 = {**cfg, "resume": str(tmp_path / "t1" / "model"), "training": {"epochs": 3, "batch_size": 4}}
    assert _run(tmp_path, "train", cfg2, "t2") == 0
    assert len(_rows(tmp_path / "t2" / "history.csv")) == 8

    ev = {"models": [{"label": "m", "bundle": str(tmp_path / "t2" / "model")}],
          "test_sets": [{"label": "test", "name": "C", "n": 6, "seed": 900}]}
    assert _run(tmp_path, "eval", ev, "ev") == 0
    rows = {r["model"]: r for r in _rows(tmp_path / "ev" / "eval.csv")}
    assert set(rows) == {"m", "fem", "projection"}
    for r in rows.values():
        assert float(rows["projection"]["mean"]) <= float(r["mean"]) + 1e-15


def test_train_data_free_without_solutions(tmp_path):
    cfg = {**SMALL, "dataset": {"name": "C", "n": 6}, "n_train": 4,
           "model": {"variant": "data-free", "hidden": [8]}, "training": {"epochs": 2, "batch_size": 2}}
    assert _run(tmp_path, "train", cfg) == 0
    assert load_model(tmp_path / "out" / "model")[0].variant == "data-free"


def test_ci_formula():
    v = np.random.default_rng(0).random(37)
    ci = confidence_interval(v)
    half = 1.96 * np.std(v, ddof=1) / np.sqrt(v.size)
    assert ci["ci_low"] == pytest.approx(v.mean() - half, rel=1e-14)
    assert ci["ci_high"] == pytest.approx(v.mean() + half, rel=1e-14)


def test_sweep_records_per_bucket(tmp_path):
    ev = {**SMALL, "baselines": ["fem", "projection"],
          "test_sets": [{"label": "ood", "name": "C", "n": 3, "seed": 7, "options": {}}]}
    cfg = {"eval": ev, "axis": {"name": "lambda", "path": ["test_sets", 0, "options", "u_length_range"],
                                "values": [[0.1, 0.1], [0.3, 0.3], [0.6, 0.6]]}}
    assert _run(tmp_path, "sweep", cfg) == 0
    recs = json.loads((tmp_path / "out" / "sweep.json").read_text())["records"]
    assert len(recs) == 6
    for r in recs:
        assert {"n", "mean", "ci_low", "ci_high"} <= set(r) and r["n"] == 3
    proj = [r["mean"] for r in recs if r["model"] == "projection"]
    assert proj[0] > proj[-1]


def test_rollout_rows(tmp_path):
    cfg = {"dataset": {"name": "D", "n": 1, "seed": 2},
           "discretization": {"n": 6, "dt": 0.01, "cells": 3}, "rollout": {"n_steps": 12}}
    assert _run(tmp_path, "rollout", cfg) == 0
    assert len(_rows(tmp_path / "out" / "rollout_0.csv")) == 12


def test_precon_bench_structure(tmp_path):
    cfg = {"dataset": {"name": "C", "n": 2, "seed": 1}, "grid": 24, "export_matrix": True}
    assert _run(tmp_path, "precon-bench", cfg, "out", "--threads", "1") == 0
    bench = json.loads((tmp_path / "out" / "bench.json").read_text())
    pairs = {(r["solver"], r["preconditioner"]) for r in bench["rows"]}
    assert len(pairs) == 15
    assert {p for _, p in pairs} == {"none", "blk-jac", "blk-jac+NGO"}
    assert {s for s, _ in pairs} == {"GMRES(inf)", "GMRES(50)", "F-GMRES(inf)", "F-GMRES(50)", "Bi-CGSTAB"}
    assert all(r["all_converged"] for r in bench["rows"])
    assert (tmp_path / "out" / "C.mtx").exists()


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"dataset": "C", "n": 1}))
    r = subprocess.run([sys.executable, "-m", "ngo", "generate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert r.returncode == 0
