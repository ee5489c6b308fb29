"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line that the session prints at the end
(see conftest.py). Training-based checks take minutes; run only these with
``pytest -m acceptance``.
"""
import json
import time

import numpy as np
import pytest

from conftest import VERDICTS
from fdcheck import check_params
from maggnn.agent import AgentConfig, Experience, JointAction, QNetworkModel, apply_action, q_tables_batch
from maggnn.agent import initial_state, random_state, rollout_batch, td_loss
from maggnn.cli import RUN_ROOT_ENV, bench_report, main
from maggnn.datasets import (
    TASK_GRAPH_CLASS, TASK_GRAPH_REG, TASK_NODE_REG, DatasetInstance, csl_dataset, cycle_dataset, select_outputs,
    srg_pair_dataset, standardize, supergraph_dataset, target_stats,
)
from maggnn.graph import erdos_renyi, generate_cycle_union, generate_srg_pair, mark, permute, supergraph_block_of
from maggnn.nn import MLP, MPNN, Linear, MpnnSpec, ParamStore, Tensor, make_batch, pool
from maggnn.nn import autodiff as ad
from maggnn.nn.layers import BatchNorm, LayerNorm, training_mode
from maggnn.subgraph import PredictionModel, batch_loss, calibrate_statistics, encode_set, full_subgraph_gnn, train_random_tuples
from maggnn.training import EnvConfig, RunConfig, evaluate, ord_train
from maggnn.wl import all_tuples, brute_force_discriminative, distinguishable, wl_refine

pytestmark = pytest.mark.acceptance


def verdict(num: int, ok: bool, detail: str) -> None:
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'} {num}: {detail}")
    assert ok, detail


def perturb(store: ParamStore, seed: int, scale: float = 0.1) -> None:
    # zero biases put ReLU inputs exactly on the kink; move every weight off it
    rng = np.random.default_rng(seed)
    for _, p in store.trainable_items():
        p.value = p.value + scale * rng.normal(size=p.value.shape)


# 1 ---------------------------------------------------------------------------

def test_cycle_union_oracle():
    tic = time.perf_counter()
    a = generate_cycle_union((3, 3, 3))
    b = generate_cycle_union((3, 6))
    same = wl_refine(a) == wl_refine(b)
    found = brute_force_discriminative(b, a, 1)
    hexagon = {(v,) for v in range(3, 9)}
    elapsed = time.perf_counter() - tic
    ok = same and found == hexagon and elapsed < 1.0
    verdict(1, ok, f"unmarked histograms identical={same}, k=1 witnesses={sorted(v for (v,) in found)}, "
                   f"{elapsed:.3f}s")


# 2 ---------------------------------------------------------------------------

CSL_CFG = dict(epochs=150, agent_steps=2000, seed=0)


def test_csl_classification():
    tic = time.perf_counter()
    ds = csl_dataset()
    cfg = RunConfig(agent=AgentConfig(m=1, k=2, t=4, norm="none"), env=EnvConfig(hidden_dim=64, num_layers=4),
                    batch_size=16, **CSL_CFG)
    res = ord_train(cfg, ds)
    rep = evaluate(res.env_model, res.qnet, ds.instances, repeats=10, t=4, seed=1)
    curve = rep["curve"]
    elapsed = time.perf_counter() - tic
    ok = rep["mean"] >= 0.99 and curve[0] < curve[-1] and elapsed <= 30 * 60
    verdict(2, ok, f"CSL final accuracy {rep['mean']:.4f} over 10 repeats, step-0 {curve[0]:.4f}, "
                   f"curve {[round(c, 4) for c in curve]}, {elapsed / 60:.1f} min")


# 3 and 10 share one run ------------------------------------------------------

@pytest.fixture(scope="module")
def srg_run():
    ds = srg_pair_dataset(copies=16)
    cfg = RunConfig(agent=AgentConfig(m=1, k=2, t=2, sync_rate=150, batch_size=32),
                    epochs=600, batch_size=32, agent_steps=4000, seed=0)
    tic = time.perf_counter()
    res = ord_train(cfg, ds)
    return ds, res, time.perf_counter() - tic


def test_srg_pair(srg_run):
    s, r = generate_srg_pair()
    k1 = distinguishable(mark(s, (0,)), mark(r, (0,)))
    k2 = bool(brute_force_discriminative(s, r, 2))
    ds, res, _ = srg_run
    pair = ds.split("train")[:2]
    assert {d.target for d in pair} == {0, 1}
    trials = 1000
    rep = evaluate(res.env_model, res.qnet, pair * trials, repeats=1, t=2, seed=5)
    both = np.array(rep["per_graph"]).reshape(trials, 2).min(axis=1) == 1.0
    wins = int(both.sum())
    ok = (not k1) and k2 and wins >= 950
    verdict(3, ok, f"k=1 distinguishable={k1}, k=2 distinguishable={k2}, pair correct in {wins}/1000 trials")


def test_reward_convergence(srg_run):
    _, res, _ = srg_run
    rewards = np.array(res.log.column("reward_mean", "agent"))
    trailing = np.array([rewards[max(0, i - 499):i + 1].mean() for i in range(len(rewards))])
    final_third = trailing[2 * len(rewards) // 3:]
    ok = bool(np.all(final_third > 0))
    verdict(10, ok, f"trailing-500 mean reward over the final third: min {final_third.min():.4f}, "
                    f"last {final_third[-1]:.4f}")


# 4 ---------------------------------------------------------------------------

def steps_to_opposite(qnet, graphs, epsilon, trials, cap, rng):
    def opposite(state):
        a, b = (supergraph_block_of(int(x)) for x in state.tuples[0])
        return (a - b) % 12 == 6

    hits = []
    for trial in range(trials):
        state = random_state(graphs[trial % len(graphs)], 1, 2, rng)
        steps = 0
        while not opposite(state) and steps < cap:
            (state,), _ = rollout_batch(qnet, None, None, [state], 1, epsilon, rng, with_rewards=False)
            steps += 1
        hits.append(steps)
    return np.array(hits)


SG_CFG = dict(epochs=150, agent_steps=2000, seed=0)


def test_supergraph_separation():
    tic = time.perf_counter()
    ds = supergraph_dataset(n=3, num_positive=500, num_negative=500)
    cfg = RunConfig(agent=AgentConfig(m=1, k=2, t=3, num_layers=6, hidden_dim=32, norm="none"),
                    env=EnvConfig(hidden_dim=32, num_layers=3, norm="layer", head_norm="batch", calibrate=2),
                    batch_size=32, **SG_CFG)
    res = ord_train(cfg, ds)
    graphs = [d.graph for d in ds.split("test")]
    rng = np.random.default_rng(123)
    agent = steps_to_opposite(res.qnet, graphs, 0.0, 300, 20, rng)
    random = steps_to_opposite(res.qnet, graphs, 1.0, 1000, 500, rng)
    elapsed = time.perf_counter() - tic
    expected = 4 * 3 - 1
    ok = np.median(agent) <= 3 and abs(random.mean() - expected) <= 0.2 * expected and elapsed <= 20 * 60
    verdict(4, ok, f"agent median steps {np.median(agent):.1f}, random mean {random.mean():.2f} "
                   f"(target {expected} +-20%), {elapsed / 60:.1f} min")


# 5 ---------------------------------------------------------------------------

def test_enumeration_equivalence():
    worst = 0.0
    for draw in range(20):
        rng = np.random.default_rng(draw)
        k = 1 + draw % 2
        g = erdos_renyi(int(rng.integers(3, 7)), 0.5, draw)
        model = PredictionModel.create(1, k, TASK_GRAPH_REG, 2, hidden_dim=8, num_layers=2, seed=draw)
        perturb(model.store, draw, 0.3)
        with ad.no_grad():
            a = encode_set(model, g, list(all_tuples(g.num_nodes, k))).value
            b, calls = full_subgraph_gnn(model, g, k)
        assert calls == g.num_nodes ** k
        worst = max(worst, float(np.max(np.abs(a - b.value))))
    verdict(5, worst <= 1e-9, f"max |encode_set(V^k) - full enumeration| over 20 draws = {worst:.2e}")


# 6 ---------------------------------------------------------------------------

def gradient_cases():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(6, 4)))
    cases = {}

    def layer_case(build, training):
        st = ParamStore()
        mods = build(st)
        perturb(st, 1)

        def f():
            h = x
            with training_mode(*[m for m in mods if hasattr(m, "train")]) if training else _null():
                for m in mods:
                    h = m(h)
            return ad.sum_all(ad.tanh(h))
        return f, st

    cases["linear"] = layer_case(lambda st: [Linear(st, "l", 4, 3, rng)], False)
    cases["mlp"] = layer_case(lambda st: [MLP(st, "m", [4, 5, 3], rng)], False)
    cases["mlp_batch_norm_train"] = layer_case(lambda st: [MLP(st, "m", [4, 5, 3], rng, norm="batch",
                                                               input_norm=True)], True)
    cases["mlp_batch_norm_eval"] = layer_case(lambda st: [MLP(st, "m", [4, 5, 3], rng, norm="batch")], False)
    cases["layer_norm"] = layer_case(lambda st: [Linear(st, "l", 4, 4, rng), LayerNorm(st, "n", 4)], False)
    cases["batch_norm"] = layer_case(lambda st: [Linear(st, "l", 4, 4, rng), BatchNorm(st, "n", 4)], True)

    graphs = [mark(erdos_renyi(6, 0.5, s), (s % 6, (s + 2) % 6)) for s in range(3)]
    batch = make_batch(graphs)
    for norm in ("batch", "layer", "none"):
        for jk in ("none", "sum"):
            st = ParamStore()
            spec = MpnnSpec(3, 4, 2, jumping_knowledge=jk, norm=norm, learn_epsilon=True, epsilon=0.1)
            net = MPNN(spec, st, "g", np.random.default_rng(1))
            perturb(st, 2)

            def f(net=net):
                with training_mode(net):
                    h = net.forward_batch(batch)
                return ad.sum_all(ad.tanh(pool("graph", h, batch)))
            cases[f"gin_{norm}_jk_{jk}"] = (f, st)

    # both losses through the prediction encoder g_p
    g = erdos_renyi(6, 0.5, 7)
    for task, out, target in ((TASK_GRAPH_CLASS, 3, 1), (TASK_NODE_REG, 2, rng.normal(size=(6, 2)))):
        model = PredictionModel.create(1, 2, task, out, hidden_dim=4, num_layers=2, seed=3)
        perturb(model.store, 4)
        inst = [DatasetInstance(g, target), DatasetInstance(permute(g, rng.permutation(6)), target)]
        U = [np.array([[0, 3], [2, 2]]), np.array([[1, 5], [4, 0]])]

        def f(model=model, inst=inst, U=U):
            with training_mode(model.encoder, model.head):
                return batch_loss(model, inst, U)
        cases[f"g_p_{model.loss_kind}"] = (f, model.store)

    # the agent encoder g_rl and the Q-head through the TD loss
    q = QNetworkModel(1, 2, hidden_dim=4, num_layers=2, seed=5, zero_head=False)
    perturb(q.store, 6)
    q.target_store.copy_from(q.store)
    exp_rng = np.random.default_rng(8)
    exps = []
    for _ in range(3):
        s = random_state(g, 2, 2, exp_rng)
        a = JointAction(tuple((int(exp_rng.integers(0, 2)), int(exp_rng.integers(0, 6))) for _ in range(2)))
        exps.append(Experience(s, a, float(exp_rng.normal()), apply_action(s, a)))
    cases["g_rl_and_q_head"] = (lambda: td_loss(q, exps, 0.9), q.store)
    return cases


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_gradient_correctness():
    tic = time.perf_counter()
    worst = {}
    for name, (f, store) in gradient_cases().items():
        rep = check_params(f, store.trainable_items())
        worst[name] = max(rep.values())
    elapsed = time.perf_counter() - tic
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    ok = not bad and elapsed < 60
    verdict(6, ok, f"{len(worst)} cases, worst relative error {max(worst.values()):.2e}, "
                   f"failures {sorted(bad)}, {elapsed:.1f}s")


# 7 ---------------------------------------------------------------------------

def test_equivariance_suite():
    store = ParamStore()
    net = MPNN(MpnnSpec(3, hidden_dim=8, num_layers=3), store, "g", np.random.default_rng(0))
    perturb(store, 0)
    q = QNetworkModel(1, 2, hidden_dim=8, num_layers=2, seed=3, zero_head=False)
    perturb(q.store, 3)
    node_err = pool_err = q_err = 0.0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(5, 12))
        g = erdos_renyi(n, 0.35, trial)
        perm = rng.permutation(n)
        tup = tuple(int(x) for x in rng.integers(0, n, size=2))
        ptup = tuple(int(perm[x]) for x in tup)
        with ad.no_grad():
            h = net(mark(g, tup)).value
            hp = net(mark(permute(g, perm), ptup)).value
        node_err = max(node_err, float(np.max(np.abs(hp[perm] - h))))
        with ad.no_grad():
            pool_err = max(pool_err, float(np.max(np.abs(pool("graph", Tensor(hp)).value
                                                          - pool("graph", Tensor(h)).value))))
        tuples = rng.integers(0, n, size=(2, 2))
        tabs = q_tables_batch(q, [initial_state(g, tuples)])[0]
        ptabs = q_tables_batch(q, [initial_state(permute(g, perm), perm[tuples])])[0]
        q_err = max(q_err, max(float(np.max(np.abs(b[perm] - a))) for a, b in zip(tabs, ptabs)))
    ok = max(node_err, pool_err, q_err) <= 1e-6
    verdict(7, ok, f"50 permutations each: node embeddings {node_err:.1e}, graph pool {pool_err:.1e}, "
                   f"Q-table {q_err:.1e}")


# 8 ---------------------------------------------------------------------------

CYCLE_CFG = dict(m=4, k=2, t=2, epochs=150, agent_steps=1000, hidden_dim=32, num_layers=4, calibrate=2)


def test_cycle_counting():
    c = CYCLE_CFG
    raw = select_outputs(cycle_dataset(), [0])
    mean, std = target_stats(raw)
    ds = standardize(raw, mean, std)
    test = ds.split("test")
    env = EnvConfig(hidden_dim=c["hidden_dim"], num_layers=c["num_layers"], calibrate=c["calibrate"])
    # same encoder, same epochs and the same statistics calibration; only the marking is absent
    plain = PredictionModel.create(ds.feature_dim, 0, ds.task, 1, env.hidden_dim, env.num_layers, seed=0)
    train_random_tuples(plain, ds.split("train"), 1, epochs=c["epochs"], batch_size=16, seed=0)
    calibrate_statistics(plain, ds.split("train"), 1, passes=c["calibrate"], batch_size=16)
    plain_mae = evaluate(plain, None, test, repeats=1, scale=std)["mean"]
    cfg = RunConfig(agent=AgentConfig(m=c["m"], k=c["k"], t=c["t"], sync_rate=150, batch_size=32, norm="none"),
                    env=env, epochs=c["epochs"], batch_size=16, agent_steps=c["agent_steps"], seed=0)
    res = ord_train(cfg, ds)
    rep = evaluate(res.env_model, res.qnet, test, repeats=10, t=c["t"], m=c["m"], scale=std)
    ratio = rep["mean"] / plain_mae
    verdict(8, ratio <= 0.2, f"3-cycle MAE: MAG-GNN {rep['mean']:.4f} vs plain MPNN {plain_mae:.4f}, "
                             f"ratio {ratio:.3f}")


# 9 ---------------------------------------------------------------------------

def test_complexity_accounting():
    n, k, m, t = 16, 2, 2, 3
    report, _ = bench_report(5, n, k, m, t, seed=0)
    rows = report["rows"]
    counts_ok = report["all_counts_match"] and len(rows) == 5
    counts_ok &= all(r["enum_calls"] == n ** k and r["mag_q_calls"] == m * t and r["mag_env_calls"] == m
                     for r in rows)
    c = report["per_step_constant"]
    measured = {r["enum_calls"] / r["mag_q_calls"] for r in rows}
    ok = counts_ok and measured == {n ** k / (m * t * c)}
    verdict(9, ok, f"5 graphs: enumeration {n ** k} calls, agent {m * t}, prediction {m}; "
                   f"measured ratio {sorted(measured)} vs |V|^k/(m t c) = {n ** k / (m * t * c)}")


# 11 --------------------------------------------------------------------------

def test_reproducibility(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path))
    small = ["--data", "exp-like", "--m", "1", "--k", "1", "--t", "2", "--epochs", "1", "--agent-steps", "4",
             "--hidden-dim", "8", "--num-layers", "2", "--agent-hidden-dim", "8", "--agent-layers", "2"]
    commands = {
        "gen": (["gen", "--dataset", "csl"], "graphs.jsonl"),
        "train-ord": (["train", "--paradigm", "ord", *small], "metrics.csv"),
        "train-simul": (["train", "--paradigm", "simul", *small], "metrics.csv"),
        "bench": (["bench", "--graphs", "2", "--n", "8"], "bench.json"),
    }
    same = {}
    for name, (argv, artifact) in commands.items():
        outs = []
        for rep in range(2):
            assert main([*argv, "--out", f"{name}{rep}"]) == 0
            outs.append((tmp_path / f"{name}{rep}" / artifact).read_bytes())
        same[name] = outs[0] == outs[1]
    for rep in range(2):
        assert main(["eval", "--run", "train-ord0", "--repeats", "2", "--out", f"eval{rep}"]) == 0
    reports = [json.loads((tmp_path / f"eval{rep}" / "report.json").read_text()) for rep in range(2)]
    same["eval"] = reports[0] == reports[1]
    capsys.readouterr()
    verdict(11, all(same.values()), f"identical outputs across repeated runs: {same}")
