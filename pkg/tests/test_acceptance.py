"""Acceptance checks. Each test prints one ``ACCEPTANCE <n> ... PASS|FAIL`` line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from ccmia.cli import STAGES, main
from ccmia.federated import FedConfig, run_federation
from ccmia.gnn import ModelParams, grad_check, init_params
from ccmia.graph import PropagationMode
from ccmia.inversion import project_unit, sample_top_edges
from ccmia.metrics import auc, auc_null_std
from ccmia.partition import partition
from ccmia.pipeline import (ExperimentConfig, defended_clients, load_target, make_partition, run_experiment,
                            train_federation)

from conftest import random_graph, small_sbm
from test_cli import snapshot
from test_inversion import _fd_inversion
from test_metrics import concordance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def say(n, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return say


def test_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for mode in PropagationMode:
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n, h = int(rng.integers(4, 13)), int(rng.integers(2, 9))
            g = random_graph(n, 3, 3, p=0.35, seed=seed, train=0.6)
            p = init_params(3, h, 3, seed + 100, mode)
            p = ModelParams(p.W1, rng.normal(scale=0.1, size=h), p.W2, rng.normal(scale=0.1, size=3), mode)
            worst = max(worst, grad_check(p, g))
    took = time.perf_counter() - t0
    ok = worst < 1e-4 and took < 10
    assert verdict(1, "gradient correctness", ok, f"max rel err {worst:.2e}, {took:.2f}s")


def test_2_inversion_differentiation(verdict):
    t0 = time.perf_counter()
    worst = max(_fd_inversion(mode, 0) for mode in PropagationMode)
    took = time.perf_counter() - t0
    ok = worst < 1e-3 and took < 30
    assert verdict(2, "inversion differentiation", ok, f"6 nodes, max rel err {worst:.2e}, {took:.2f}s")


def test_3_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    gap = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        s = np.round(rng.normal(size=n), int(rng.integers(0, 4)))
        gap = max(gap, abs(auc(s, y) - concordance(s, y)))
    example = auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = gap <= 1e-9 and example == 0.875
    assert verdict(3, "metric oracles", ok,
                   f"trapezoid vs concordance max gap {gap:.1e}; worked example gives {example}, expected 0.875")


def test_4_aggregation_equivalences(verdict):
    g = small_sbm((20, 20), seed=1)
    clients = list(partition(g, 3, seed=0).subgraphs)
    base = dict(rounds=5, lr=0.1, hidden=8, momentum=0.5, weight_decay=1e-3, seed=3)

    def same(a, b):
        return a.params.equal(b.params) and all(
            r.snapshot.equal(s.snapshot) and all(x.equal(y) for x, y in zip(r.uploads, s.uploads))
            for r, s in zip(a.records, b.records))

    avg = run_federation(clients, FedConfig(**base))
    prox = same(avg, run_federation(clients, FedConfig(**base, strategy="fedprox", prox_mu=0.0)))
    nova = same(avg, run_federation(clients, FedConfig(**base, strategy="fednova", local_steps=1)))
    one = {**base, "rounds": 1}
    scaf = same(run_federation(clients, FedConfig(**one)), run_federation(clients, FedConfig(**one, strategy="scaffold")))
    ok = prox and nova and scaf
    assert verdict(4, "aggregation equivalences", ok,
                   f"fedprox(0)=fedavg {prox}, scaffold round 1=fedavg {scaf}, fednova(tau=1)=fedavg {nova}")


def test_5_membership_signal(verdict):
    cfg = ExperimentConfig.load(CONFIGS / "membership.json")
    t0 = time.perf_counter()
    aucs = [run_experiment(cfg.with_seed(s), ownership=False).mi_auc for s in SEEDS]
    took = time.perf_counter() - t0
    mean = float(np.mean(aucs))
    ok = mean >= 0.65 and took < 300
    assert verdict(5, "membership attack signal", ok,
                   f"mean AUC {mean:.3f} over seeds {[round(a, 3) for a in aucs]}, {took:.1f}s")


@pytest.fixture(scope="module")
def ownership_runs():
    cfg = ExperimentConfig.load(CONFIGS / "ownership.json")
    t0 = time.perf_counter()
    res = [run_experiment(cfg.with_seed(s), membership=False) for s in SEEDS]
    return res, time.perf_counter() - t0


def test_6_ownership_signal(verdict, ownership_runs):
    res, took = ownership_runs
    accs = [r.own_acc for r in res]
    mean = float(np.mean(accs))
    ok = mean >= 0.48 and took < 600
    assert verdict(6, "ownership attack signal", ok,
                   f"mean accuracy {mean:.3f} vs uniform 0.333, seeds {[round(a, 3) for a in accs]}, {took:.1f}s")


def test_7_inversion_quality(verdict, ownership_runs):
    res, _ = ownership_runs
    invs = [i for r in res for i in r.inversions if not math.isnan(i.edge_auc)]
    edge = float(np.mean([i.edge_auc for i in invs]))
    # std of a mean of independent null AUCs
    sigma = math.sqrt(sum(i.edge_auc_null_std ** 2 for i in invs)) / len(invs)
    threshold = 0.5 + 3 * sigma
    err = float(np.mean([i.rnmse for i in invs]))
    base = float(np.mean([i.rnmse_baseline for i in invs]))
    edge_ok, feat_ok = edge > threshold, err < base
    assert verdict(7, "inversion quality", edge_ok and feat_ok,
                   f"edge AUC {edge:.3f} vs threshold {threshold:.3f} {'ok' if edge_ok else 'not met'}; "
                   f"RNMSE {err:.3f} vs baseline {base:.3f} {'ok' if feat_ok else 'not met'}; "
                   f"{len(invs)} client inversions")


def test_8_projection_and_sampling(verdict):
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(20):
        n = int(rng.integers(3, 15))
        rho = float(rng.uniform(0.1, 2.0))
        a = rng.normal(0.5, 0.8, size=(n, n))
        a = np.triu(a, 1) + np.triu(a, 1).T
        p = project_unit(a)
        out = sample_top_edges(p, int(math.floor(rho * n)))
        want = min(int(math.floor(rho * n)), n * (n - 1) // 2)
        good = (np.array_equal(project_unit(p), p) and np.array_equal(out, out.T)
                and set(np.unique(out)) <= {0.0, 1.0} and not np.diag(out).any()
                and int(np.triu(out, 1).sum()) == want)
        bad += not good
    assert verdict(8, "projection and top-edge invariants", bad == 0, f"{20 - bad}/20 random matrices")


def test_9_defense_trend(verdict):
    cfg = ExperimentConfig.load(CONFIGS / "defense.json")
    t0 = time.perf_counter()
    etas = (8.0, 4.0, 2.0, 1.0)
    mi, own = {}, {}
    for eta in etas:
        rs = [run_experiment(cfg.with_seed(s), eta=eta) for s in SEEDS]
        mi[eta] = float(np.mean([r.mi_auc for r in rs]))
        own[eta] = float(np.mean([r.own_acc for r in rs]))
    mono = all(mi[a] >= mi[b] and own[a] >= own[b] for a, b in zip(etas, etas[1:]))

    # sentinel: the eta = inf path against a federation that never touches the defense
    target = load_target(cfg)
    part = make_partition(cfg, target)
    plain = train_federation(cfg, list(part.subgraphs))
    sentinel = train_federation(cfg, defended_clients(cfg, part, math.inf))
    bitwise = plain.params.equal(sentinel.params) and all(
        a.equal(b) for r, s in zip(plain.records, sentinel.records) for a, b in zip(r.uploads, s.uploads))
    took = time.perf_counter() - t0
    detail = ("MI " + "/".join(f"{mi[e]:.3f}" for e in etas) + ", ownership "
              + "/".join(f"{own[e]:.3f}" for e in etas) + f" at eta 8/4/2/1; sentinel bit-for-bit {bitwise}; "
              f"{took:.1f}s")
    assert verdict(9, "defense trend", mono and bitwise, detail)


def test_10_determinism(verdict, tmp_path):
    d = json.loads((CONFIGS / "smoke.json").read_text())
    d["defense"] = {"etas": ["inf", 2], "seeds": [0]}
    d["inversion"]["epochs"] = 50
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(d))
    order = ("gen-synth", "partition", "train-fed", "attack-mi", "invert", "attack-own", "defend", "report")
    assert set(order) == set(STAGES)
    for run in ("a", "b"):
        for stage in order:
            assert main([stage, "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    assert verdict(10, "determinism", not differ,
                   f"{len(a)} files over {len(order)} subcommands, {len(differ)} differ")
