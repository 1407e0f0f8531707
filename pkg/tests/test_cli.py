from __future__ import annotations

import csv
import json
import math
import re
import shutil

import pytest

from parsched.cli import main
from parsched.predictor import TrainedModel
from parsched.workload import load_dataset, load_trace


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _rerun_identical(argv, out):
    """Run ``argv`` twice into the same fresh directory and compare every output byte."""
    assert main(argv + ["--out", str(out)]) == 0
    first = _files(out)
    shutil.rmtree(out)
    assert main(argv + ["--out", str(out)]) == 0
    assert _files(out) == first
    return first


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-workload", "--n", "1500", "--noise", "0.15", "--seed", "3", "--out", str(root / "wl")]) == 0
    data = str(root / "wl" / "dataset.jsonl")
    for obj, name in (("pairwise", "pw"), ("pointwise_l1", "pt"), ("listwise_listmle", "lw")):
        assert main(["train", "--dataset", data, "--objective", obj, "--out", str(root / name)]) == 0
    return root, data


# -- gen-workload ---------------------------------------------------------------------


def test_gen_workload_count_and_determinism(tmp_path, capsys):
    args = ["gen-workload", "--n", "1000", "--dist", "lognormal:5,1.2", "--seed", "7"]
    _rerun_identical(args, tmp_path / "a")
    assert len(load_dataset(tmp_path / "a" / "dataset.jsonl")) == 1000
    assert load_trace(tmp_path / "a" / "trace.csv").mode == "burst"
    assert "wrote 1000 records" in capsys.readouterr().out


def test_gen_workload_invalid_dist(tmp_path, capsys):
    assert main(["gen-workload", "--dist", "lognormal:5,-1", "--out", str(tmp_path)]) == 1
    assert "--dist" in capsys.readouterr().err


def test_gen_workload_poisson_needs_rate(tmp_path):
    assert main(["gen-workload", "--n", "10", "--arrival", "poisson", "--out", str(tmp_path)]) == 1
    assert main(["gen-workload", "--n", "10", "--arrival", "poisson", "--rate", "2", "--out", str(tmp_path)]) == 0


# -- train -------------------------------------------------------------------------


def test_train_separable_defaults(tmp_path, capsys):
    main(["gen-workload", "--n", "6000", "--seed", "1", "--out", str(tmp_path / "wl")])
    capsys.readouterr()
    assert main(["train", "--dataset", str(tmp_path / "wl" / "dataset.jsonl"), "--out", str(tmp_path / "m")]) == 0
    tau = float(re.search(r"validation tau_b=([0-9.]+)", capsys.readouterr().out).group(1))
    assert tau >= 0.95
    model = TrainedModel.load(tmp_path / "m" / "model.json")
    assert model.objective == "pairwise" and len(model.loss_trace) == 5
    report = json.loads((tmp_path / "m" / "train_report.json").read_text())
    assert report["val_tau_b"] == pytest.approx(tau, abs=5e-5)


def test_train_objective_tag(work):
    root, _ = work
    assert TrainedModel.load(root / "pt" / "model.json").objective == "pointwise_l1"
    assert TrainedModel.load(root / "lw" / "model.json").objective == "listwise_listmle"


def test_delta_ablation_models(work, tmp_path):
    _, data = work
    for d in ("0.0", "0.2"):
        assert main(["train", "--dataset", data, "--delta", d, "--epochs", "2", "--out", str(tmp_path / d)]) == 0
        assert TrainedModel.load(tmp_path / d / "model.json").config["delta"] == float(d)


def test_train_multiple_seeds(work, tmp_path, capsys):
    _, data = work
    assert main(["train", "--dataset", data, "--epochs", "1", "--seeds", "0,1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "seed0" / "model.json").exists() and (tmp_path / "seed1" / "model.json").exists()
    assert "mean validation tau_b over 2 seeds" in capsys.readouterr().out


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 1
    assert "--dataset" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path)]) == 1


# -- eval-predictor -----------------------------------------------------------------


def test_eval_oracle_and_zero_model(work, tmp_path, capsys):
    root, data = work
    assert main(["train", "--dataset", data, "--epochs", "0", "--out", str(tmp_path / "zero")]) == 0
    capsys.readouterr()
    args = ["eval-predictor", "--dataset", data, "--oracle", "--model", str(root / "pw" / "model.json"),
            "--model", str(tmp_path / "zero" / "model.json"), "--out", str(tmp_path / "ev")]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "WARNING: degenerate ranking" in out
    rows = json.loads((tmp_path / "ev" / "eval.json").read_text())["rows"]
    assert rows[0]["predictor"] == "oracle" and rows[0]["tau_b"] == 1.0
    assert rows[1]["objective"] == "pairwise" and rows[1]["tau_b"] > 0.8
    assert rows[2]["tau_b"] is None and "degenerate ranking" in rows[2]["warning"]


def test_eval_needs_a_predictor(work, tmp_path):
    _, data = work
    assert main(["eval-predictor", "--dataset", data, "--out", str(tmp_path)]) == 1


# -- simulate -----------------------------------------------------------------------


def test_simulate_burst_fcfs(work, tmp_path):
    _, data = work
    args = ["simulate", "--dataset", data, "--policy", "fcfs", "--burst-size", "500"]
    _rerun_identical(args, tmp_path / "a")
    run_dir = tmp_path / "a" / "fcfs" / "seed0"
    with open(run_dir / "requests.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 500
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["n_requests"] == 500 and summary["tau_b"] is None
    per_ms = [float(r["per_token_latency_ms"]) for r in rows]
    assert summary["mean_per_token_ms"] == math.fsum(per_ms) / len(per_ms)
    assert summary["p90_per_token_ms"] == sorted(per_ms)[449]


def test_simulate_pars_tag(work, tmp_path):
    root, data = work
    args = ["simulate", "--dataset", data, "--policy", "pars", "--model", str(root / "pw" / "model.json"),
            "--arrival", "poisson", "--rate", "50", "--n-requests", "200", "--out", str(tmp_path)]
    assert main(args) == 0
    summary = json.loads((tmp_path / "pars" / "seed0" / "summary.json").read_text())
    assert summary["policy"] == "pars" and 0 < summary["tau_b"] <= 1
    assert set(summary) >= {"policy", "n_requests", "mean_per_token_ms", "p90_per_token_ms", "speedup_vs_fcfs", "tau_b"}


def test_simulate_with_trace_file(work, tmp_path):
    root, data = work
    args = ["simulate", "--dataset", data, "--trace", str(root / "wl" / "trace.csv"), "--policy", "oracle",
            "--batching", "static", "--max-wait", "0.5", "--out", str(tmp_path)]
    assert main(args) == 0
    assert json.loads((tmp_path / "oracle_sjf" / "seed0" / "summary.json").read_text())["n_requests"] == 1500


def test_simulate_model_required(work, tmp_path, capsys):
    _, data = work
    assert main(["simulate", "--dataset", data, "--policy", "pars", "--out", str(tmp_path)]) == 1
    assert "needs a model" in capsys.readouterr().err
    assert main(["simulate", "--dataset", data, "--policy", "lifo", "--out", str(tmp_path)]) == 1


# -- compare ---------------------------------------------------------------------


def _compare_args(root, data, out):
    return ["compare", "--dataset", data, "--n-requests", "400",
            "--model-pars", str(root / "pw" / "model.json"),
            "--model-pointwise", str(root / "pt" / "model.json"),
            "--model-listwise", str(root / "lw" / "model.json"), "--out", str(out)]


def test_compare_all_policies_burst(work, tmp_path, capsys):
    root, data = work
    args = _compare_args(root, data, tmp_path / "a")[:-2]
    _rerun_identical(args, tmp_path / "a")
    table = capsys.readouterr().out
    report = json.loads((tmp_path / "a" / "comparison.json").read_text())
    agg = report["aggregate"]
    assert [r["policy"] for r in agg] == ["fcfs", "oracle_sjf", "pars", "pointwise_sjf", "listwise_sjf"]
    for r in agg:
        assert {"mean_per_token_ms", "p90_per_token_ms", "speedup_vs_fcfs"} <= set(r)
        assert r["policy"] in table
        assert (tmp_path / "a" / r["policy"] / "seed0" / "requests.csv").exists()
    oracle = next(r for r in agg if r["policy"] == "oracle_sjf")
    assert oracle["mean_per_token_ms"] == min(r["mean_per_token_ms"] for r in agg)
    with open(tmp_path / "a" / "comparison.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_compare_load_sweep(work, tmp_path, capsys):
    root, data = work
    args = _compare_args(root, data, tmp_path) + ["--policies", "fcfs,oracle,pars",
                                                   "--load-factors", "0.5,1,2,4", "--seeds", "0,1,2,3"]
    assert main(args) == 0
    out = capsys.readouterr().out
    agg = json.loads((tmp_path / "comparison.json").read_text())["aggregate"]
    for label in ("load_0.5", "load_1.0", "load_2.0", "load_4.0"):
        assert f"== {label} (4 seeds) ==" in out
        # multi-seed means; near capacity a single seed can let PARS edge out Oracle
        means = {r["policy"]: r["mean_per_token_ms"] for r in agg if r["scenario"] == label}
        assert means["oracle_sjf"] <= means["pars"] <= means["fcfs"]
        assert (tmp_path / label / "pars" / "seed1" / "summary.json").exists()


def test_compare_errors(work, tmp_path):
    root, data = work
    args = _compare_args(root, data, tmp_path)
    assert main(args + ["--rates", "1", "--load-factors", "1"]) == 1
    assert main(args + ["--policies", "fcfs"]) == 1


# -- config files -------------------------------------------------------------------


def test_config_defaults_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"common": {"seed": 5}, "workload": {"n": 30, "noise": 0.1}}))
    assert main(["gen-workload", "--config", str(cfg), "--n", "12", "--out", str(tmp_path / "o")]) == 0
    assert len(load_dataset(tmp_path / "o" / "dataset.jsonl")) == 12
    echoed = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echoed["seed"] == 5 and echoed["noise"] == 0.1 and echoed["n"] == 12
    assert '"noise": 0.1' in capsys.readouterr().err


def test_config_echo_reproduces_run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"workload": {"n": 40, "seed": 9, "dist": "lognormal:4,1"}}))
    assert main(["gen-workload", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    echoed = json.loads((tmp_path / "a" / "config.json").read_text())
    echoed.pop("command")
    echoed["out"] = str(tmp_path / "b")
    (tmp_path / "echo.json").write_text(json.dumps({"workload": echoed}))
    assert main(["gen-workload", "--config", str(tmp_path / "echo.json")]) == 0
    assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()


@pytest.mark.parametrize("cfg", [{"workload": {"bogus": 1}}, {"nonsense": {}}, {"workload": 3}, [1]])
def test_config_validation(tmp_path, cfg, capsys):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert main(["gen-workload", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "--config" in capsys.readouterr().err


def test_config_paths_resolved_at_validation(tmp_path, capsys):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"simulation": {"dataset": str(tmp_path / "missing.jsonl")}}))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "no such file" in capsys.readouterr().err
