"""Acceptance checks; each prints one PASS/FAIL line with its measured value."""
import json
import time

import numpy as np
import pytest

from calm import cli
from calm import discover as dc
from calm import featurize as fz
from calm import kernels
from calm import ndgrad as ng
from calm import pcbaseline as pb
from calm import simgen
from calm import ssmnet as sm
from calm import stattests as st
from calm.table import DataTable

from conftest import ACCEPTANCE_LINES
from test_ndgrad import naive_scan


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1

def test_1_gradient_integrity():
    t0 = time.perf_counter()
    errs = []
    for seed in range(5):
        cfg = sm.ModelConfig(d=8, n_features=6, delta=16, max_bins=4, seed=seed)
        rng = np.random.default_rng(seed)
        base = sm.init_params(cfg, cfg.token_width, seed)
        params = {k: ng.Tensor(v + 0.1 * rng.normal(size=v.shape), requires_grad=True)
                  for k, v in base.items()}
        P = ng.Tensor(rng.uniform(size=(4, 6, cfg.token_width)))
        y = np.array([0, 1, 1, 0])
        f = lambda: sm.bce_loss(sm.forward(P, params, cfg), y)  # noqa: E731
        errs.append(ng.finite_diff_check(f, list(params.values()), max_entries=12, seed=seed))
    dt = time.perf_counter() - t0
    record(1, "gradient integrity", max(errs) < 1e-4 and dt < 60,
           f"max rel err {max(errs):.2e} over 5 configs, {dt:.1f}s")


# 2

def test_2_ssm_oracle_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        N, J, D, S = (int(v) for v in rng.integers(1, 6, 4))
        u = rng.normal(size=(N, J, D))
        Wdt, bdt = rng.normal(size=(D, D)) * 0.3, rng.normal(size=D)
        WB, WC = rng.normal(size=(D, S)), rng.normal(size=(D, S))
        A_log, alpha = np.log(rng.uniform(0.1, 3, (D, S))), rng.normal(size=D)
        delta = np.logaddexp(0, u @ Wdt + bdt)
        ref = naive_scan(u, delta, -np.exp(A_log), u @ WB, u @ WC) + alpha * u
        backends = ("numpy", "cython") if kernels.HAVE_COMPILED else ("numpy",)
        for b in backends:
            out = sm.ssm_scan(*(ng.Tensor(a) for a in (u, Wdt, bdt, WB, WC, A_log, alpha)), backend=b)
            worst = max(worst, float(np.max(np.abs(out.data - ref))))
    dt = time.perf_counter() - t0
    record(2, "SSM oracle equivalence", worst < 1e-10,
           f"max abs diff {worst:.1e} on 50 shapes ({', '.join(backends)}), {dt:.1f}s")


# 3

def _null_conditional(seed, n=500):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=n)
    x, y = 0.8 * z + rng.normal(size=n), 0.8 * z + rng.normal(size=n)
    return DataTable.from_arrays(np.column_stack([x, y, z]), ["x", "y", "z"])


def _null_independent(seed, n=500):
    return DataTable.from_arrays(np.random.default_rng(seed).normal(size=(n, 2)), ["x", "y"])


def _null_linear(seed, n=500):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    return DataTable.from_arrays(np.column_stack([x, 0.7 * x + rng.normal(size=n)]), ["x", "y"])


def test_3_statistical_calibration():
    tests = {
        "fisher-z": lambda s: st.fisher_z(_null_conditional(s), "x", "y", ("z",)).p_value,
        "hsic": lambda s: st.hsic(_null_independent(s), "x", "y").p_value,
        "kci": lambda s: st.kci(_null_conditional(s), "x", "y", ("z",)).p_value,
        "reset": lambda s: st.reset_test(_null_linear(s), "x", "y")[1],
    }
    t0 = time.perf_counter()
    rates = {k: float(np.mean([f(1000 + s) < 0.05 for s in range(500)])) for k, f in tests.items()}
    dt = time.perf_counter() - t0
    ok = all(0.03 <= r <= 0.07 for r in rates.values()) and dt < 600
    record(3, "statistical calibration", ok,
           ", ".join(f"{k} {r:.3f}" for k, r in rates.items()) + f" (500 nulls, n=500), {dt:.0f}s")


# 4

def test_4_estimator_accuracy():
    mis = []
    for s in range(50):
        rng = np.random.default_rng(4000 + s)
        x = rng.normal(size=2000)
        y = 0.5 * x + np.sqrt(0.75) * rng.normal(size=2000)
        mis.append(st.kraskov_mi(DataTable.from_arrays(np.column_stack([x, y]), ["x", "y"]), "x", "y"))
    mi = float(np.mean(mis))
    hits = 0
    for s in range(100):
        rng = np.random.default_rng(5000 + s)
        x = rng.normal(size=500)
        y = np.tanh(2 * x) + 0.3 * rng.normal(size=500)
        hits += st.anm_direction(DataTable.from_arrays(np.column_stack([x, y]), ["x", "y"]), "x", "y").binary
    ok = abs(mi - 0.1438) <= 0.03 and hits >= 90
    record(4, "estimator accuracy", ok, f"Kraskov MI {mi:.4f} (target 0.1438), ANM tanh {hits}/100")


# 5

@pytest.fixture(scope="module")
def benchmark_model():
    t0 = time.perf_counter()
    ck, mat = cli.train_benchmark_model(seed=0, threads=None)
    return ck, mat, time.perf_counter() - t0


def test_5_desk_benchmark(benchmark_model):
    ck, _, t_train = benchmark_model
    t0 = time.perf_counter()
    rep = pb.run_benchmark(pb.desk_suite(seed=0), ["pc", "calm"], ck)
    dt = t_train + time.perf_counter() - t0
    calm, pc = rep.mean_accuracy("calm"), rep.mean_accuracy("pc")
    ok = calm - pc >= 0.10 and calm >= 0.70 and dt < 1800
    record(5, "desk-scale benchmark", ok,
           f"CALM {calm:.3f} vs PC {pc:.3f} (gap {100 * (calm - pc):+.1f} pp), {dt / 60:.1f} min")


# 6

def test_6_pipeline_invariants(benchmark_model, tmp_path):
    _, mat, _ = benchmark_model
    acyclic = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 9))
        nodes = [f"v{i}" for i in range(n)]
        edges = {(a, b): float(rng.uniform(0.5, 1)) for a in nodes for b in nodes
                 if a != b and rng.uniform() < 0.4}
        g, _ = dc.resolve_bidirectional(dc.Digraph(nodes, edges))
        out, _ = dc.break_cycles(g)
        acyclic += out.is_acyclic() and set(out.edges) <= set(edges)

    labels = [r.label for r in mat.records]
    per_set = {}
    for r in mat.records:
        per_set.setdefault(r.key.dataset, []).append(r.label)
    balanced = labels.count(1) == labels.count(0) and all(v.count(1) == v.count(0) for v in per_set.values())

    cfg = sm.ModelConfig(d=8, layers=1, delta=8, epochs=3, seed=6)
    tr, va = cli.split_train_val(mat, 0.2, 6)
    a, b = sm.train(tr, va, cfg), sm.train(tr, va, cfg)
    same_seed = a.to_bytes() == b.to_bytes()
    sm.save(a, tmp_path / "a.calm")
    back = sm.load(tmp_path / "a.calm")
    round_trip = back.to_bytes() == a.to_bytes() and all(
        np.array_equal(a.params[k], back.params[k]) for k in a.params)
    ok = acyclic == 100 and balanced and same_seed and round_trip
    record(6, "pipeline invariants", ok,
           f"acyclic {acyclic}/100, balanced {balanced} ({len(per_set)} sets), "
           f"round trip {round_trip}, same-seed bytes {same_seed}")


# 7

def test_7_pc_baseline_sanity():
    chain = simgen.GroundTruthDag(["x", "y", "z"], [("x", "y"), ("y", "z")])
    want = {frozenset("xy"), frozenset("yz")}
    hits = sum(pb.pc_skeleton(simgen.simulate_linear_gaussian(chain, 2000, s).table)[0] == want
               for s in range(100))
    invariant = 0
    for s in range(10):
        ds = simgen.simulate_mixed_mechanisms(simgen.mixed_mechanism_dag(10, 15, s), 500, s)
        base = pb.pc(ds.table).to_json()
        perm = list(np.random.default_rng(s).permutation(ds.table.names))
        other = pb.pc(ds.table.reorder_columns(perm)).to_json()
        base.pop("nodes"), other.pop("nodes")
        invariant += json.dumps(base, sort_keys=True) == json.dumps(other, sort_keys=True)
    record(7, "PC baseline sanity", hits >= 95 and invariant == 10,
           f"chain skeleton {hits}/100, permutation invariant {invariant}/10")


# 8

def test_8_shuffled_label_control(benchmark_model):
    _, mat, _ = benchmark_model
    accs = []
    for k in range(5):
        rng = np.random.default_rng(80 + k)
        labels = rng.permutation([r.label for r in mat.records])
        shuffled = fz.ScoreMatrix([fz.ScoreRecord(r.key, r.features, r.mask, int(lab), r.flags)
                                   for r, lab in zip(mat.records, labels)],
                                  mat.schema_version, mat.normalization, mat.meta)
        tr, va = cli.split_train_val(shuffled, 0.2, 80 + k)
        ck = sm.train(tr, va, sm.ModelConfig(seed=80 + k))
        accs.append(ck.history[ck.history[-1]["best_epoch"]]["val_accuracy"])
    acc = float(np.mean(accs))
    record(8, "shuffled-label control", abs(acc - 0.5) <= 0.07,
           f"validation accuracy {acc:.3f} over 5 permutations ({', '.join(f'{a:.3f}' for a in accs)})")
