import numpy as np
import pytest
from hypothesis import given, strategies as hst

from calm import simgen


def test_random_dag_counts_and_acyclic():
    dag = simgen.random_dag(10, 20, seed=3)
    assert len(dag.edges) == 20 and len(set(dag.edges)) == 20
    order = {v: i for i, v in enumerate(dag.topological_order())}
    assert all(order[a] < order[b] for a, b in dag.edges)


def test_random_dag_rejects_too_many_edges():
    with pytest.raises(ValueError):
        simgen.random_dag(4, 7, seed=0)


def test_truth_validation():
    with pytest.raises(ValueError):
        simgen.GroundTruthDag(["a", "b"], [("a", "a")])
    with pytest.raises(ValueError):
        simgen.GroundTruthDag(["a", "b"], [("a", "c")])
    with pytest.raises(ValueError):
        simgen.GroundTruthDag(["a", "b"], [("a", "b"), ("b", "a")])


def test_same_seed_same_data_and_different_seed_differs():
    dag = simgen.random_dag(6, 8, seed=1)
    a = simgen.simulate_linear_gaussian(dag, 200, seed=5)
    b = simgen.simulate_linear_gaussian(dag, 200, seed=5)
    c = simgen.simulate_linear_gaussian(dag, 200, seed=6)
    assert np.array_equal(a.table.values, b.table.values)
    assert not np.array_equal(a.table.values, c.table.values)


def test_linear_gaussian_recovers_coefficient():
    dag = simgen.GroundTruthDag(["x", "y"], [("x", "y")])
    ds = simgen.simulate_linear_gaussian(dag, 20000, seed=0, coefs={("x", "y"): 0.8},
                                         noise_vars={"x": 1.0, "y": 0.5})
    x, y = ds.table.column("x"), ds.table.column("y")
    slope = np.polyfit(x, y, 1)[0]
    assert abs(slope - 0.8) < 0.02
    assert abs(np.var(y - 0.8 * x) - 0.5) < 0.03


def test_drawn_parameters_respect_ranges():
    ds = simgen.simulate_linear_gaussian(simgen.random_dag(12, 30, seed=2), 50, seed=2)
    coefs = np.abs(list(ds.params["edges"].values()))
    assert coefs.min() >= 0.5 and coefs.max() <= 1.5
    nv = np.array(list(ds.params["noise_var"].values()))
    assert nv.min() >= 0.5 and nv.max() <= 1.5


def test_mgm_without_discrete_matches_linear():
    dag = simgen.random_dag(5, 6, seed=9)
    a = simgen.simulate_mgm(dag, 100, seed=1)
    b = simgen.simulate_linear_gaussian(dag, 100, seed=1)
    assert np.array_equal(a.table.values, b.table.values)


def test_mgm_discrete_codes_and_dependence():
    dag = simgen.GroundTruthDag(["x", "d"], [("x", "d")], {}, {"d": 3})
    ds = simgen.simulate_mgm(dag, 3000, seed=0, coefs={("x", "d"): 1.5})
    d = ds.table.column("d")
    assert set(np.unique(d)) <= {0.0, 1.0, 2.0}
    assert ds.table.is_discrete("d") and ds.table.cardinality("d") == 3
    assert np.corrcoef(ds.table.column("x"), d)[0, 1] > 0.3
    assert ds.truth.mechanisms[("x", "d")] == "mixed"


def test_nonlinear_function_pinning_and_noise_range():
    dag = simgen.GroundTruthDag(["x", "y"], [("x", "y")])
    ds = simgen.simulate_nonlinear(dag, 500, seed=4, funcs={"y": "tanh"})
    assert ds.params["functions"]["y"] == "tanh"
    assert 0.1 <= ds.params["noise_var"]["y"] <= 0.3
    with pytest.raises(ValueError):
        simgen.simulate_nonlinear(simgen.GroundTruthDag(["x"], [], {}, {"x": 2}), 10, 0)


def test_mixed_mechanism_dag_thirds():
    dag = simgen.mixed_mechanism_dag(18, 36, seed=11)
    tags = [dag.mechanisms[e] for e in dag.edges]
    assert len(dag.edges) == 36
    assert tags.count("linear") == tags.count("nonlinear") == tags.count("mixed") == 12
    for a, b in dag.edges:
        mixed = dag.is_discrete(a) != dag.is_discrete(b)
        assert mixed == (dag.mechanisms[(a, b)] == "mixed")
        assert not (dag.is_discrete(a) and dag.is_discrete(b))


def test_eval_suite_scale_and_reproducible():
    a = simgen.make_eval_suite(seed=1, scale=0.2, n_datasets=2)
    b = simgen.make_eval_suite(seed=1, scale=0.2, n_datasets=2)
    assert len(a) == 2
    assert a[0].table.values.shape == (300, 18)
    assert len(a[0].truth.edges) == 36
    assert all(np.array_equal(x.table.values, y.table.values) for x, y in zip(a, b))


def test_training_sets_disjoint_from_suite():
    train = simgen.make_training_sets(seed=0, n_datasets=3)
    suite = simgen.make_eval_suite(seed=0, scale=0.2, n_datasets=3)
    assert {d.seed for d in train}.isdisjoint({d.seed for d in suite})
    assert all(d.table.values.shape == (500, 20) for d in train)


def test_dataset_save_load_round_trip(tmp_path):
    ds = simgen.simulate("mgm", 6, 8, 50, seed=3)
    csv_path, json_path = ds.save(tmp_path / "d.csv")
    back = simgen.Dataset.load(csv_path, json_path)
    assert np.array_equal(back.table.values, ds.table.values)
    assert back.truth.edges == ds.truth.edges
    assert [c.discrete for c in back.table.columns] == [c.discrete for c in ds.table.columns]


def test_simulate_rejects_unknown_family():
    with pytest.raises(ValueError):
        simgen.simulate("quadratic", 3, 2, 10, 0)


@given(hst.integers(2, 12), hst.integers(0, 2**31 - 1), hst.sampled_from(["linear", "nonlinear", "mgm", "suite"]))
def test_every_family_yields_finite_acyclic_data(n_vars, seed, family):
    n_edges = min(n_vars * (n_vars - 1) // 2, n_vars) if family != "suite" else 3 * (n_vars // 4)
    if family == "suite" and n_vars < 6:
        n_edges = 0
    ds = simgen.simulate(family, n_vars, n_edges, 40, seed)
    assert np.isfinite(ds.table.values).all()
    ds.truth.topological_order()
    for v in ds.table.names:
        if ds.table.is_discrete(v):
            col = ds.table.column(v)
            assert np.all(col == np.round(col)) and col.max() < ds.table.cardinality(v)
