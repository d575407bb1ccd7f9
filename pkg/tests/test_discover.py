import json
from itertools import permutations

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hst

from calm import discover as dc
from calm import featurize as fz
from calm import simgen
from calm import ssmnet as sm


def G(edges, nodes=None):
    nodes = nodes or sorted({v for e in edges for v in e})
    return dc.Digraph(nodes, dict(edges))


def test_resolve_keeps_stronger_direction():
    g, log = dc.resolve_bidirectional(G({("a", "b"): 0.9, ("b", "a"): 0.6, ("b", "c"): 0.7}))
    assert g.edges == {("a", "b"): 0.9, ("b", "c"): 0.7}
    assert log == [{"kept": ["a", "b"], "dropped": ["b", "a"], "kept_confidence": 0.9,
                    "dropped_confidence": 0.6, "tie": False}]
    g, log = dc.resolve_bidirectional(G({("a", "b"): 0.55, ("b", "a"): 0.8}))
    assert list(g.edges) == [("b", "a")]


def test_resolve_tie_keeps_lexicographic_first():
    g, log = dc.resolve_bidirectional(G({("y", "x"): 0.7, ("x", "y"): 0.7}))
    assert list(g.edges) == [("x", "y")] and log[0]["tie"]


def test_break_cycles_drops_weakest_edge_of_cycle():
    g = G({("a", "b"): 0.9, ("b", "c"): 0.6, ("c", "a"): 0.8, ("c", "d"): 0.55})
    out, log = dc.break_cycles(g)
    assert set(out.edges) == {("a", "b"), ("c", "a"), ("c", "d")}
    assert log[0]["edge"] == ["b", "c"] and log[0]["confidence"] == 0.6
    assert sorted(map(tuple, log[0]["cycle"])) == [("a", "b"), ("b", "c"), ("c", "a")]


def test_break_cycles_two_overlapping_cycles():
    # a->b->a is impossible after resolution, so use two triangles sharing b->c
    g = G({("a", "b"): 0.9, ("b", "c"): 0.95, ("c", "a"): 0.6,
           ("c", "d"): 0.9, ("d", "b"): 0.7})
    out, log = dc.break_cycles(g)
    assert [e["edge"] for e in log] == [["c", "a"], ["d", "b"]]
    assert out.is_acyclic()


def test_find_cycle_none_on_dag_and_topological_order():
    g = G({("a", "b"): 0.9, ("a", "c"): 0.6, ("b", "c"): 0.8})
    assert dc.find_cycle(g) is None
    assert g.topological_order() == ["a", "b", "c"]
    with pytest.raises(ValueError):
        G({("a", "b"): 1.0, ("b", "a"): 1.0}).topological_order()


def test_digraph_rejects_bad_edges():
    with pytest.raises(ValueError):
        dc.Digraph(["a"], {("a", "a"): 0.9})
    with pytest.raises(ValueError):
        dc.Digraph(["a", "b"], {("a", "b"): float("nan")})


def _brute_force(g):
    """Independent reimplementation over networkx cycle search."""
    ng = nx.DiGraph()
    ng.add_nodes_from(g.nodes)
    ng.add_edges_from(g.edges)
    removed = []
    while True:
        try:
            cyc = [(a, b) for a, b in nx.find_cycle(ng)]
        except nx.NetworkXNoCycle:
            return set(ng.edges), removed
        worst = min(cyc, key=lambda e: (g.edges[e], e))
        ng.remove_edge(*worst)
        removed.append(worst)


def random_graph(seed, n=6, p=0.35):
    rng = np.random.default_rng(seed)
    nodes = [f"v{i}" for i in range(n)]
    edges = {}
    for a, b in permutations(nodes, 2):
        if rng.uniform() < p:
            edges[(a, b)] = float(np.round(rng.uniform(0.5, 1.0), 2))
    return dc.Digraph(nodes, edges)


@pytest.mark.parametrize("seed", range(100))
def test_pipeline_output_acyclic_and_subset(seed):
    g = random_graph(seed)
    mid, _ = dc.resolve_bidirectional(g)
    out, log = dc.break_cycles(mid)
    assert out.is_acyclic()
    assert nx.is_directed_acyclic_graph(nx.DiGraph(list(out.edges)))
    assert set(out.edges) <= set(mid.edges) <= set(g.edges)
    assert all(out.edges[e] == g.edges[e] for e in out.edges)
    assert not any((b, a) in mid.edges for a, b in mid.edges)
    for entry in log:
        cyc = [tuple(e) for e in entry["cycle"]]
        assert tuple(entry["edge"]) in cyc
        assert entry["confidence"] == min(mid.edges[e] for e in cyc)


@pytest.mark.parametrize("seed", range(20))
def test_break_cycles_matches_brute_force_on_single_cycle_graphs(seed):
    # with one simple cycle the outcome does not depend on search order
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    nodes = [f"n{i}" for i in range(k + 2)]
    conf = rng.permutation(np.linspace(0.5, 0.99, k))
    edges = {(nodes[i], nodes[(i + 1) % k]): float(c) for i, c in enumerate(conf)}
    edges[(nodes[0], nodes[k])] = 0.51
    edges[(nodes[k + 1], nodes[1])] = 0.52
    g = dc.Digraph(nodes, edges)
    out, log = dc.break_cycles(g)
    oracle, oracle_removed = _brute_force(g)
    assert set(out.edges) == oracle and [tuple(e["edge"]) for e in log] == oracle_removed


@given(hst.integers(0, 10_000))
def test_break_cycles_idempotent(seed):
    out, _ = dc.break_cycles(dc.resolve_bidirectional(random_graph(seed, n=5, p=0.5))[0])
    again, log = dc.break_cycles(out)
    assert again.edges == out.edges and log == []


def test_export_formats_round_trip():
    res = dc.DagResult(G({("a", "b"): 0.8, ('q"x', "a"): 0.6}, ["a", "b", 'q"x', "z"]),
                       classified={("a", "b"): 0.8, ("b", "a"): 0.2, ('q"x', "a"): 0.6})
    back = dc.DagResult.from_json(json.loads(dc.export(res, "json")))
    assert back.dag.edges == res.dag.edges and back.classified == res.classified
    assert back.dag.nodes == res.dag.nodes
    dot = dc.export(res, "dot")
    assert dot.startswith("digraph calm {") and '"a" -> "b" [label="0.8000"];' in dot
    assert r'"q\"x" -> "a"' in dot and '  "z";' in dot
    with pytest.raises(ValueError):
        dc.export(res, "png")
    with pytest.raises(ValueError):
        dc.DagResult.from_json({"version": "calm-dag/0"})


def test_export_empty_dag():
    res = dc.DagResult(dc.Digraph(["a", "b"]))
    assert dc.export(res, "dot") == 'digraph calm {\n  "a";\n  "b";\n}\n'
    assert json.loads(dc.export(res, "json"))["edges"] == []


# end to end with a small classifier

@pytest.fixture(scope="module")
def small_model():
    sets = [simgen.simulate_nonlinear(simgen.random_dag(8, 5, s), 300, s) for s in (1, 2)]
    mat = fz.assemble_training(sets, seed=0, threads=1, reversed_fraction=0.5)
    cfg = sm.ModelConfig(d=8, layers=1, delta=8, epochs=5, patience=5, seed=0)
    return sm.train(mat, mat, cfg)


@pytest.fixture(scope="module")
def chain_table():
    return simgen.simulate_nonlinear(simgen.random_dag(4, 3, 11), 300, 12).table


def test_estimate_outputs_consistent(small_model, chain_table):
    res = dc.estimate(chain_table, small_model, config=dc.EstimateConfig(threads=1))
    assert res.dag.is_acyclic()
    assert set(res.dag.edges) <= {e for e, c in res.classified.items() if c >= 0.5}
    assert all(0.0 <= c <= 1.0 for c in res.classified.values())
    n = len(chain_table.names)
    assert len(res.classified) + len(res.prefiltered_noncausal) == n * (n - 1)
    for entry in res.removed_bidirectional:
        assert entry["kept_confidence"] >= entry["dropped_confidence"]


def test_estimate_deterministic_and_threshold(small_model, chain_table):
    a = dc.estimate(chain_table, small_model, config=dc.EstimateConfig(threads=1))
    b = dc.estimate(chain_table, small_model, config=dc.EstimateConfig(threads=2))
    assert dc.export(a, "json") == dc.export(b, "json")
    none = dc.estimate(chain_table, small_model, config=dc.EstimateConfig(threshold=1.01, threads=1))
    assert none.dag.edges == {}


def test_estimate_explicit_pairs(small_model, chain_table):
    a, b = chain_table.names[:2]
    res = dc.estimate(chain_table, small_model, task="explicit", pairs=[(a, b)],
                      config=dc.EstimateConfig(alpha=0.999, threads=1))
    assert set(res.classified) <= {(a, b)}


def test_estimate_reports_failing_step(small_model, chain_table):
    bad = sm.Checkpoint.from_bytes(small_model.to_bytes())
    bad.params["W_head"] = np.full_like(bad.params["W_head"], np.nan)
    with pytest.raises(dc.StepError) as info:
        dc.estimate(chain_table, bad, config=dc.EstimateConfig(alpha=0.999, threads=1))
    assert info.value.step == 3
    with pytest.raises(dc.StepError) as info:
        dc.estimate(chain_table, small_model, task="target", target="nope")
    assert info.value.step == 2
