"""Ground-truth DAGs and synthetic datasets.

Families
--------
linear     x = sum(coef * parent) + N(0, s2)
mgm        linear-Gaussian for continuous children, adjacent-category
           multinomial logit for discrete children, one-hot (ordinal)
           effects for discrete parents
nonlinear  x = f(sum(coef * parent)) + noise, f in {arctan, sin, cos,
           tanh, odd power 2, odd power 3}
suite      one graph mixing linear, nonlinear and mixed edges in equal
           thirds; the desk-scale benchmark generator

Coefficients are drawn from +-U[0.5, 1.5] and noise variances from
U[0.5, 1.5] unless noted. Everything is a pure function of its
arguments and the seed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

from .table import DataTable


COEF_RANGE = (0.5, 1.5)
NOISE_VAR_RANGE = (0.5, 1.5)
NONLINEAR_NOISE_VAR_RANGE = (0.1, 0.3)
NONLINEAR_GAIN = 1.5
DEFAULT_CARDINALITY = 3
NONLINEAR_FUNCS = ("arctan", "sin", "cos", "tanh", "pow2", "pow3")
MECHANISMS = ("linear", "nonlinear", "mixed")


@dataclass
class GroundTruthDag:
    variables: list[str]
    edges: list[tuple[str, str]]
    mechanisms: dict = field(default_factory=dict)  # (cause, effect) -> tag
    cardinality: dict = field(default_factory=dict)  # name -> 0 (continuous) or k

    def __post_init__(self):
        self.edges = [tuple(e) for e in self.edges]
        seen = set()
        names = set(self.variables)
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop on {a}")
            if a not in names or b not in names:
                raise ValueError(f"edge {a}->{b} uses an unknown variable")
            if (a, b) in seen:
                raise ValueError(f"duplicate edge {a}->{b}")
            seen.add((a, b))
        for v in self.variables:
            self.cardinality.setdefault(v, 0)
        for e in self.edges:
            self.mechanisms.setdefault(e, "linear")
        self.topological_order()

    def parents(self, v):
        return [a for a, b in self.edges if b == v]

    def topological_order(self):
        """Deterministic topological order; raises ValueError on a cycle."""
        ts = TopologicalSorter({v: [] for v in self.variables})
        for a, b in self.edges:
            ts.add(b, a)
        try:
            ts.prepare()
        except CycleError as exc:
            raise ValueError(f"graph is cyclic: {exc.args[1]}") from None
        rank = {v: i for i, v in enumerate(self.variables)}
        order = []
        while ts.is_active():
            ready = sorted(ts.get_ready(), key=rank.get)
            order.extend(ready)
            ts.done(*ready)
        return order

    def is_discrete(self, v):
        return self.cardinality.get(v, 0) > 0

    def to_json(self):
        return {
            "variables": list(self.variables),
            "edges": [
                {"cause": a, "effect": b, "mechanism": self.mechanisms[(a, b)]}
                for a, b in self.edges
            ],
            "types": {v: ("discrete" if self.is_discrete(v) else "continuous")
                      for v in self.variables},
            "cardinality": {v: self.cardinality[v] for v in self.variables if self.is_discrete(v)},
        }

    @classmethod
    def from_json(cls, obj):
        edges = [(e["cause"], e["effect"]) for e in obj["edges"]]
        mech = {(e["cause"], e["effect"]): e.get("mechanism", "linear") for e in obj["edges"]}
        card = {v: int(k) for v, k in obj.get("cardinality", {}).items()}
        return cls(list(obj["variables"]), edges, mech, card)


@dataclass
class Dataset:
    table: DataTable
    truth: GroundTruthDag
    seed: int
    generator: str
    params: dict = field(default_factory=dict)

    def save(self, csv_path, json_path=None):
        """Write values as CSV and a sidecar JSON with types, truth and parameters."""
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.table.names)
            for row in self.table.values:
                w.writerow([_fmt(v, c.discrete) for v, c in zip(row, self.table.columns)])
        meta = {
            "format": "calm-dataset/1",
            "generator": self.generator,
            "seed": self.seed,
            "truth": self.truth.to_json(),
            "params": self.params,
        }
        json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path, json_path=None):
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        meta = json.loads(json_path.read_text())
        truth = GroundTruthDag.from_json(meta["truth"])
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        names = rows[0]
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        disc = [v for v in names if truth.is_discrete(v)]
        table = DataTable.from_arrays(values, names, disc,
                                      {v: truth.cardinality[v] for v in disc},
                                      meta={"generator": meta["generator"]})
        return cls(table, truth, meta["seed"], meta["generator"], meta.get("params", {}))


def _fmt(v, discrete):
    return str(int(v)) if discrete else repr(float(v))


def _names(n):
    return [f"X{i + 1}" for i in range(n)]


def random_dag(n_vars, n_edges, seed):
    """Uniform sample of ``n_edges`` forward pairs under a random order."""
    max_edges = n_vars * (n_vars - 1) // 2
    if n_edges > max_edges:
        raise ValueError(f"{n_edges} edges do not fit on {n_vars} nodes (max {max_edges})")
    rng = np.random.default_rng(seed)
    names = _names(n_vars)
    order = rng.permutation(n_vars)
    pairs = [(order[i], order[j]) for i in range(n_vars) for j in range(i + 1, n_vars)]
    pick = rng.choice(len(pairs), size=n_edges, replace=False) if n_edges else []
    edges = sorted((names[pairs[p][0]], names[pairs[p][1]]) for p in pick)
    return GroundTruthDag(names, edges)


def _coef(rng, size=None):
    mag = rng.uniform(*COEF_RANGE, size=size)
    sign = rng.choice([-1.0, 1.0], size=size)
    return mag * sign


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def _apply_nonlinear(name, s):
    if name == "arctan":
        return np.arctan(s)
    if name == "sin":
        return np.sin(s)
    if name == "cos":
        return np.cos(s)
    if name == "tanh":
        return np.tanh(s)
    if name in ("pow2", "pow3"):
        p = 2 if name == "pow2" else 3
        return np.sign(s) * np.abs(s) ** p
    raise ValueError(f"unknown nonlinearity {name!r}")


def _unit_scale(v):
    sd = v.std()
    return v / sd if sd > 0 else v


def _ordinal_scores(k):
    return np.arange(k) - (k - 1) / 2.0


def _sample_categorical(rng, logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(p.shape[0])[:, None]
    return (u > np.cumsum(p, axis=1)).sum(axis=1).clip(max=p.shape[1] - 1).astype(float)


def _finish(dag, X, seed, generator, params):
    disc = [v for v in dag.variables if dag.is_discrete(v)]
    table = DataTable.from_arrays(X, dag.variables, disc, {v: dag.cardinality[v] for v in disc},
                                  meta={"generator": generator})
    return Dataset(table, dag, int(seed), generator, params)


def _linear_mgm(dag, n, seed, generator, coefs=None, noise_vars=None):
    coefs = coefs or {}
    noise_vars = noise_vars or {}
    rng = np.random.default_rng(seed)
    idx = {v: i for i, v in enumerate(dag.variables)}
    X = np.zeros((n, len(dag.variables)))
    params = {"coef_range": COEF_RANGE, "noise_var_range": NOISE_VAR_RANGE, "edges": {}, "noise_var": {}}
    for v in dag.topological_order():
        pars = sorted(dag.parents(v), key=idx.get)
        if dag.is_discrete(v):
            k = dag.cardinality[v]
            score = _ordinal_scores(k)
            logits = np.zeros((n, k))
            for p in pars:
                c = float(coefs.get((p, v), _coef(rng)))
                params["edges"][f"{p}->{v}"] = c
                if dag.is_discrete(p):
                    px = _ordinal_scores(dag.cardinality[p])[X[:, idx[p]].astype(int)]
                else:
                    px = _standardize(X[:, idx[p]])
                logits += c * px[:, None] * score[None, :]
            X[:, idx[v]] = _sample_categorical(rng, logits)
        else:
            s2 = float(noise_vars.get(v, rng.uniform(*NOISE_VAR_RANGE)))
            params["noise_var"][v] = s2
            x = rng.normal(0.0, np.sqrt(s2), size=n)
            for p in pars:
                c = float(coefs.get((p, v), _coef(rng)))
                params["edges"][f"{p}->{v}"] = c
                if dag.is_discrete(p):
                    x = x + c * _ordinal_scores(dag.cardinality[p])[X[:, idx[p]].astype(int)]
                else:
                    x = x + c * X[:, idx[p]]
            X[:, idx[v]] = x
    return _finish(dag, X, seed, generator, params)


def simulate_linear_gaussian(dag, n, seed, coefs=None, noise_vars=None):
    """Linear SEM with Gaussian noise, sampled in topological order.

    ``coefs`` ({(cause, effect): value}) and ``noise_vars`` ({name: value})
    pin individual parameters; the rest are drawn from the default ranges.
    """
    if any(dag.is_discrete(v) for v in dag.variables):
        raise ValueError("linear Gaussian simulation needs all-continuous variables")
    dag = GroundTruthDag(dag.variables, dag.edges, {e: "linear" for e in dag.edges}, dict(dag.cardinality))
    return _linear_mgm(dag, n, seed, "linear", coefs, noise_vars)


def simulate_mgm(dag, n, seed, coefs=None, noise_vars=None):
    """Ancestral sampling of a mixed continuous/discrete model.

    Discrete children use an adjacent-category logit, so the category
    scores are ordinal in the parent; discrete parents shift continuous
    children by an ordinal per-category effect. With no discrete variables
    this reproduces :func:`simulate_linear_gaussian` draw for draw.
    """
    mech = {}
    for a, b in dag.edges:
        mixed = dag.is_discrete(a) != dag.is_discrete(b)
        mech[(a, b)] = "mixed" if mixed else dag.mechanisms.get((a, b), "linear")
    dag = GroundTruthDag(dag.variables, dag.edges, mech, dict(dag.cardinality))
    gen = "mgm" if any(dag.is_discrete(v) for v in dag.variables) else "linear"
    return _linear_mgm(dag, n, seed, gen, coefs, noise_vars)


def simulate_nonlinear(dag, n, seed, funcs=None):
    """x = g * f(gain * standardized(sum coef*parents)) + noise.

    One function per child; ``funcs`` may pin it ({name: func}).
    The function output is rescaled to unit variance before noise is added.
    """
    if any(dag.is_discrete(v) for v in dag.variables):
        raise ValueError("nonlinear simulation needs all-continuous variables")
    rng = np.random.default_rng(seed)
    funcs = funcs or {}
    idx = {v: i for i, v in enumerate(dag.variables)}
    X = np.zeros((n, len(dag.variables)))
    params = {"edges": {}, "functions": {}, "noise_var": {}, "gain": NONLINEAR_GAIN}
    for v in dag.topological_order():
        pars = sorted(dag.parents(v), key=idx.get)
        if not pars:
            s2 = float(rng.uniform(*NOISE_VAR_RANGE))
            params["noise_var"][v] = s2
            X[:, idx[v]] = rng.normal(0.0, np.sqrt(s2), size=n)
            continue
        s = np.zeros(n)
        for p in pars:
            c = float(_coef(rng))
            params["edges"][f"{p}->{v}"] = c
            s += c * X[:, idx[p]]
        f = funcs.get(v) or str(rng.choice(NONLINEAR_FUNCS))
        params["functions"][v] = f
        s2 = float(rng.uniform(*NONLINEAR_NOISE_VAR_RANGE))
        params["noise_var"][v] = s2
        out = _unit_scale(_apply_nonlinear(f, NONLINEAR_GAIN * _standardize(s)))
        X[:, idx[v]] = out + rng.normal(0.0, np.sqrt(s2), size=n)
    dag = GroundTruthDag(dag.variables, dag.edges, {e: "nonlinear" for e in dag.edges}, dict(dag.cardinality))
    return _finish(dag, X, seed, "nonlinear", params)


def mixed_mechanism_dag(n_vars, n_edges, seed, discrete_fraction=1 / 6, cardinality=DEFAULT_CARDINALITY):
    """Random DAG whose edges are split into equal linear/nonlinear/mixed thirds.

    Mixed edges join exactly one discrete and one continuous node; the
    discrete nodes have no other edges. Any remainder after splitting in
    three goes to the linear share.
    """
    rng = np.random.default_rng(seed)
    names = _names(n_vars)
    n_mixed = n_nonlin = n_edges // 3
    n_lin = n_edges - n_mixed - n_nonlin
    n_disc = max(1, int(round(n_vars * discrete_fraction))) if n_mixed else 0
    order = rng.permutation(n_vars)
    rank = {int(node): r for r, node in enumerate(order)}
    disc = set(int(i) for i in rng.choice(n_vars, size=n_disc, replace=False)) if n_disc else set()
    cont = [i for i in range(n_vars) if i not in disc]

    def forward(a, b):
        return (a, b) if rank[a] < rank[b] else (b, a)

    mixed_pool = sorted({forward(a, b) for a in disc for b in cont})
    cc_pool = sorted({forward(a, b) for i, a in enumerate(cont) for b in cont[i + 1:]})
    if n_mixed > len(mixed_pool) or n_lin + n_nonlin > len(cc_pool):
        raise ValueError("too many edges for this number of variables")
    mixed = [mixed_pool[i] for i in rng.choice(len(mixed_pool), size=n_mixed, replace=False)]
    cc = [cc_pool[i] for i in rng.choice(len(cc_pool), size=n_lin + n_nonlin, replace=False)]
    mech = {}
    for a, b in mixed:
        mech[(names[a], names[b])] = "mixed"
    for i, (a, b) in enumerate(cc):
        mech[(names[a], names[b])] = "linear" if i < n_lin else "nonlinear"
    edges = sorted(mech)
    card = {names[i]: (cardinality if i in disc else 0) for i in range(n_vars)}
    return GroundTruthDag(names, edges, mech, card)


def simulate_mixed_mechanisms(dag, n, seed):
    """Additive per-edge contributions with each edge's own mechanism.

    Parents enter standardized, so every edge carries comparable signal:
    linear edges add coef*z, nonlinear edges add sign(coef)*f(gain*z)
    rescaled to unit variance, and mixed edges use the mgm conventions.
    """
    rng = np.random.default_rng(seed)
    idx = {v: i for i, v in enumerate(dag.variables)}
    X = np.zeros((n, len(dag.variables)))
    params = {"edges": {}, "functions": {}, "noise_var": {}}
    for v in dag.topological_order():
        pars = sorted(dag.parents(v), key=idx.get)
        if dag.is_discrete(v):
            k = dag.cardinality[v]
            logits = np.zeros((n, k))
            for p in pars:
                c = float(_coef(rng))
                params["edges"][f"{p}->{v}"] = c
                logits += c * _standardize(X[:, idx[p]])[:, None] * _ordinal_scores(k)[None, :]
            X[:, idx[v]] = _sample_categorical(rng, logits)
            continue
        s2 = float(rng.uniform(*NOISE_VAR_RANGE))
        params["noise_var"][v] = s2
        x = rng.normal(0.0, np.sqrt(s2), size=n)
        for p in pars:
            c = float(_coef(rng))
            params["edges"][f"{p}->{v}"] = c
            if dag.is_discrete(p):
                scores = _ordinal_scores(dag.cardinality[p])
                x = x + c * scores[X[:, idx[p]].astype(int)] / scores.std()
                continue
            z = _standardize(X[:, idx[p]])
            if dag.mechanisms[(p, v)] == "nonlinear":
                f = str(rng.choice(NONLINEAR_FUNCS))
                params["functions"][f"{p}->{v}"] = f
                x = x + np.sign(c) * _unit_scale(_apply_nonlinear(f, NONLINEAR_GAIN * z))
            else:
                x = x + c * z
        X[:, idx[v]] = x
    return _finish(dag, X, seed, "suite", params)


def make_eval_suite(seed, scale=1.0, n_datasets=20, n_rows=None):
    """Benchmark suite: 20 datasets of 90 variables, 180 edges, 1500 rows.

    ``scale`` shrinks variables, edges and rows proportionally; ``n_rows``
    overrides the row count.
    """
    n_vars = int(round(90 * scale))
    n_edges = int(round(180 * scale))
    rows = int(n_rows) if n_rows is not None else int(round(1500 * scale))
    ss = np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(n_datasets):
        s = int(child.generate_state(1)[0])
        dag = mixed_mechanism_dag(n_vars, n_edges, s)
        out.append(simulate_mixed_mechanisms(dag, rows, s + 1))
    return out


def make_training_sets(seed, n_datasets=3, n_vars=20, n_rows=500, edges_per_var=2):
    """Training corpus drawn from the suite generator with disjoint seeds."""
    ss = np.random.SeedSequence([seed, 7919])
    out = []
    for child in ss.spawn(n_datasets):
        s = int(child.generate_state(1)[0])
        dag = mixed_mechanism_dag(n_vars, n_vars * edges_per_var, s)
        out.append(simulate_mixed_mechanisms(dag, n_rows, s + 1))
    return out


def simulate(family, n_vars, n_edges, n_rows, seed):
    """Dispatch used by the CLI."""
    if family == "linear":
        return simulate_linear_gaussian(random_dag(n_vars, n_edges, seed), n_rows, seed)
    if family == "nonlinear":
        return simulate_nonlinear(random_dag(n_vars, n_edges, seed), n_rows, seed)
    if family == "mgm":
        dag = random_dag(n_vars, n_edges, seed)
        rng = np.random.default_rng([seed, 1])
        n_disc = max(1, n_vars // 3)
        disc = set(rng.choice(dag.variables, size=n_disc, replace=False).tolist())
        card = {v: (DEFAULT_CARDINALITY if v in disc else 0) for v in dag.variables}
        return simulate_mgm(GroundTruthDag(dag.variables, dag.edges, {}, card), n_rows, seed)
    if family == "suite":
        return simulate_mixed_mechanisms(mixed_mechanism_dag(n_vars, n_edges, seed), n_rows, seed + 1)
    raise ValueError(f"unknown family {family!r}")
