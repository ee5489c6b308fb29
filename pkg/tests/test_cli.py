import json

import numpy as np
import pytest

from maggnn.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, MARKER, RUN_ROOT_ENV, bench_report, main
from maggnn.datasets import read_jsonl
from maggnn.graph import generate_srg_pair, graph_to_dict
from maggnn.wl import cycle_count_targets

TRAIN_SMALL = ["--data", "exp-like", "--m", "1", "--k", "1", "--t", "2", "--epochs", "1", "--agent-steps", "4",
               "--hidden-dim", "8", "--num-layers", "2", "--agent-hidden-dim", "8", "--agent-layers", "2"]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path))
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out.splitlines()[-1]) if out.strip() else None)


def test_gen_csl(root, capsys):
    code, info = run(capsys, "gen", "--dataset", "csl", "--out", "csl")
    assert code == EXIT_OK
    assert info["num_records"] == 150 and len(info["class_counts"]) == 10
    assert (root / "csl" / MARKER).exists()
    man = json.loads((root / "csl" / "manifest.json").read_text())
    assert man["command"] == "gen" and set(man["artifacts"]) == {"graphs.jsonl", "dataset.json"}
    assert {"config_hash", "run_id", "seed", "started", "finished"} <= set(man)
    ds = read_jsonl(root / "csl" / "graphs.jsonl", "csl", "graph-class", 10)
    assert len(ds) == 150 and len({d.target for d in ds.instances}) == 10


def test_gen_refuses_non_empty_unless_forced(root, capsys):
    assert run(capsys, "gen", "--dataset", "exp-like", "--out", "d")[0] == EXIT_OK
    assert run(capsys, "gen", "--dataset", "exp-like", "--out", "d")[0] == EXIT_USAGE
    assert run(capsys, "gen", "--dataset", "exp-like", "--out", "d", "--force")[0] == EXIT_OK


def test_gen_supergraph_balanced(root, capsys):
    code, info = run(capsys, "gen", "--dataset", "supergraph", "--n", "2", "--out", "sg")
    assert code == EXIT_OK
    assert info["num_records"] == 200 and info["class_counts"] == {"0": 100, "1": 100}


def test_gen_cycles_targets(root, capsys):
    code, info = run(capsys, "gen", "--dataset", "cycles", "--num-graphs", "12", "--out", "cyc")
    assert code == EXIT_OK and info["num_records"] == 12
    ds = read_jsonl(root / "cyc" / "graphs.jsonl", "cycles", "node-reg", 4)
    for d in ds.instances:
        assert np.array_equal(d.target, cycle_count_targets(d.graph))


def test_gen_is_reproducible(root, capsys):
    run(capsys, "gen", "--dataset", "csl", "--out", "a", "--seed", "7")
    run(capsys, "gen", "--dataset", "csl", "--out", "b", "--seed", "7")
    assert (root / "a" / "graphs.jsonl").read_bytes() == (root / "b" / "graphs.jsonl").read_bytes()


def test_train_eval_round_trip(root, capsys):
    code, info = run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--out", "r1")
    assert code == EXIT_OK
    files = {p.name for p in (root / "r1").iterdir()}
    assert {"env_model.json", "env_model.bin", "agent.json", "agent.bin", "metrics.csv", "config.json",
            "manifest.json", MARKER} <= files
    code, rep = run(capsys, "eval", "--run", "r1", "--steps", "3", "--out", "e1", "--per-graph")
    assert code == EXIT_OK
    assert rep["repeats"] == 10 and len(rep["curve"]) == 4 and rep["mpnn_calls"] > 0
    per_graph = (root / "e1" / "per_graph.csv").read_text().splitlines()
    assert per_graph[0] == "index,target,accuracy" and len(per_graph) == rep["num_graphs"] + 1


def test_train_is_reproducible(root, capsys):
    run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--out", "a")
    run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--out", "b")
    a = (root / "a" / "metrics.csv").read_bytes()
    assert a == (root / "b" / "metrics.csv").read_bytes()
    ma = json.loads((root / "a" / "manifest.json").read_text())
    mb = json.loads((root / "b" / "manifest.json").read_text())
    assert ma["run_id"] == mb["run_id"] and ma["config_hash"] == mb["config_hash"]


def test_train_simul_runs(root, capsys):
    code, info = run(capsys, "train", "--paradigm", "simul", *TRAIN_SMALL, "--out", "s")
    assert code == EXIT_OK and info["counters"]["env_steps"] == info["counters"]["agent_steps"]


def test_train_pre_uses_frozen_agent(root, capsys):
    run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--out", "base")
    agent = str(root / "base" / "agent")
    code, _ = run(capsys, "train", "--paradigm", "pre", *TRAIN_SMALL, "--pretrained-agent", agent, "--out", "p")
    assert code == EXIT_OK
    code, rep = run(capsys, "eval", "--run", "p", "--repeats", "2")
    assert code == EXIT_OK and len(rep["curve"]) == 3


def test_train_invalid_paradigm(root, capsys):
    code, _ = run(capsys, "train", "--paradigm", "bogus", "--out", "bad")
    assert code == EXIT_USAGE
    assert not (root / "bad").exists()


def test_train_config_file_and_precedence(root, capsys):
    cfg = root / "c.toml"
    cfg.write_text('paradigm = "ord"\ndataset = "exp-like"\nepochs = 3\nagent_steps = 2\n'
                   "[agent]\nk = 1\nt = 1\nhidden_dim = 8\nnum_layers = 2\n[env]\nhidden_dim = 8\nnum_layers = 2\n")
    code, _ = run(capsys, "train", "--config", str(cfg), "--epochs", "1", "--out", "c")
    assert code == EXIT_OK
    resolved = json.loads((root / "c" / "config.json").read_text())
    assert resolved["epochs"] == 1 and resolved["agent_steps"] == 2 and resolved["agent"]["t"] == 1


def test_train_config_lists_every_problem(root, capsys):
    cfg = root / "bad.toml"
    cfg.write_text('paradigm = "nope"\nepochs = -2\nmystery = 1\n[agent]\ngamma = 3.0\n')
    code = main(["train", "--config", str(cfg), "--out", "x"])
    err = capsys.readouterr().err
    assert code == EXIT_USAGE
    assert "mystery" in err
    cfg.write_text('paradigm = "nope"\nepochs = -2\n[agent]\ngamma = 3.0\n')
    code = main(["train", "--config", str(cfg), "--out", "x"])
    err = capsys.readouterr().err
    assert code == EXIT_USAGE
    assert "paradigm" in err and "epochs" in err and "gamma" in err
    assert not (root / "x").exists()


def test_eval_missing_checkpoint(root, capsys):
    run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--out", "r")
    (root / "r" / "env_model.bin").unlink()
    code = main(["eval", "--run", "r"])
    assert code == EXIT_RUNTIME
    assert "env_model.bin" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["gen", "--dataset", "nope", "--out", "x"]) == EXIT_USAGE


def test_bench_counts(root, capsys):
    code, rep = run(capsys, "bench", "--graphs", "5", "--n", "16", "--k", "2", "--m", "2", "--t", "2", "--out", "b")
    assert code == EXIT_OK
    assert rep["enumeration_calls"] == 256 and rep["mag_q_calls"] == 4 and rep["mag_env_calls"] == 2
    assert rep["all_counts_match"] and len(rep["rows"]) == 5
    assert all(r["enum_calls"] == 256 for r in rep["rows"])
    assert (root / "b" / "timing.json").exists()


def test_bench_ratio_scales_with_nodes_squared():
    small, _ = bench_report(2, 8, 2, 2, 2, 0)
    large, _ = bench_report(2, 16, 2, 2, 2, 0)
    assert large["ratio"] == 4 * small["ratio"]


def test_bench_budget_gives_partial_report(capsys):
    code, rep = run(capsys, "bench", "--graphs", "2", "--n", "16", "--budget", "100")
    assert code == EXIT_OK and rep["partial"] and rep["rows"][0]["enum_calls"] is None


def test_bench_is_reproducible(root, capsys):
    run(capsys, "bench", "--out", "a")
    run(capsys, "bench", "--out", "b")
    assert (root / "a" / "bench.json").read_bytes() == (root / "b" / "bench.json").read_bytes()


def test_oracle_srg(capsys):
    code, rep = run(capsys, "oracle", "--pair", "srg", "--k", "1")
    assert code == EXIT_OK and rep["unmarked"] == "indistinguishable" and rep["k1"] == "indistinguishable"
    code, rep = run(capsys, "oracle", "--pair", "srg", "--k", "2")
    assert rep["k2"] == "distinguishable" and rep["witnesses"]["k2"]


def test_oracle_identical_graphs(root, capsys):
    s, _ = generate_srg_pair()
    path = root / "s.json"
    path.write_text(json.dumps(graph_to_dict(s)))
    code, rep = run(capsys, "oracle", "--graph-a", str(path), "--k", "1", "2")
    assert code == EXIT_OK
    assert rep["unmarked"] == rep["k1"] == rep["k2"] == "indistinguishable"


def test_oracle_budget_error(capsys):
    assert main(["oracle", "--pair", "srg", "--k", "2", "--budget", "10"]) == EXIT_RUNTIME


def test_train_norm_and_calibration_flags(root, capsys):
    code, _ = run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--head-norm", "batch", "--agent-norm", "none",
                  "--calibrate", "1", "--out", "n")
    assert code == EXIT_OK
    resolved = json.loads((root / "n" / "config.json").read_text())
    assert resolved["env"]["head_norm"] == "batch" and resolved["env"]["calibrate"] == 1
    assert resolved["agent"]["norm"] == "none"
    assert run(capsys, "train", "--paradigm", "ord", *TRAIN_SMALL, "--head-norm", "group", "--out", "g")[0] == EXIT_USAGE
