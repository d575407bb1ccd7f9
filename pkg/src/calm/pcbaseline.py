"""PC-stable baseline with Meek orientation and a method benchmark."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats

from . import stattests as st

log = logging.getLogger(__name__)

REPORT_VERSION = "calm-benchmark/1"


@dataclass
class Cpdag:
    nodes: list
    directed: set = field(default_factory=set)  # (a, b) means a -> b
    undirected: set = field(default_factory=set)  # frozenset({a, b})
    sepsets: dict = field(default_factory=dict)  # frozenset({a, b}) -> tuple
    conflicts: list = field(default_factory=list)

    def adjacent(self, a, b):
        return (a, b) in self.directed or (b, a) in self.directed or frozenset((a, b)) in self.undirected

    def check(self):
        for a, b in self.directed:
            if a == b or frozenset((a, b)) in self.undirected:
                raise ValueError("directed and undirected edge sets must be disjoint")
        return self

    def to_json(self):
        return {"nodes": list(self.nodes),
                "directed": sorted([a, b] for a, b in self.directed),
                "undirected": sorted(sorted(e) for e in self.undirected),
                "sepsets": {"|".join(sorted(k)): list(v) for k, v in sorted(self.sepsets.items(),
                                                                             key=lambda t: sorted(t[0]))},
                "conflicts": self.conflicts}


class CorrelationCI:
    """Fisher-z tests read off one correlation matrix of complete rows."""

    def __init__(self, table):
        data = table.values
        data = data[np.isfinite(data).all(axis=1)]
        self.n = data.shape[0]
        self.names = table.names
        self.idx = {n: i for i, n in enumerate(self.names)}
        sd = data.std(axis=0)
        self.constant = sd == 0
        safe = np.where(self.constant, 1.0, sd)
        z = (data - data.mean(axis=0)) / safe
        self.corr = (z.T @ z) / max(self.n, 1)
        np.fill_diagonal(self.corr, 1.0)

    def p_value(self, a, b, cond=()):
        ia, ib = self.idx[a], self.idx[b]
        if self.constant[ia] or self.constant[ib]:
            return 1.0
        ic = [self.idx[c] for c in cond if not self.constant[self.idx[c]]]
        dof = self.n - len(cond) - 3
        if dof < 1:
            return 1.0
        sub = self.corr[np.ix_([ia, ib, *ic], [ia, ib, *ic])]
        r = st.partial_corr(sub)
        if r is None:
            r = st.partial_corr(sub + 1e-10 * np.eye(len(sub)))
        r = float(np.clip(r, -1 + 1e-15, 1 - 1e-15))
        return float(2.0 * stats.norm.sf(np.sqrt(dof) * abs(np.arctanh(r))))


def pc_skeleton(table, alpha=st.ALPHA, max_cond=3, ci=None):
    """PC-stable adjacency search; returns (set of frozenset edges, sepsets)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    ci = ci or CorrelationCI(table)
    nodes = sorted(table.names)  # sorted traversal makes sepsets column-order free
    adj = {v: set(nodes) - {v} for v in nodes}
    sepsets = {}
    level = 0
    while level <= max_cond:
        frozen = {v: set(adj[v]) for v in nodes}  # neighbourhoods fixed per level
        removals = []
        any_testable = False
        for a in nodes:
            for b in sorted(frozen[a]):
                if b not in adj[a]:
                    continue
                others = sorted(frozen[a] - {b})
                if len(others) < level:
                    continue
                any_testable = True
                for S in combinations(others, level):
                    if ci.p_value(a, b, S) > alpha:
                        removals.append((a, b, S))
                        adj[a].discard(b)
                        adj[b].discard(a)
                        break
        for a, b, S in removals:
            key = frozenset((a, b))
            if key not in sepsets:
                sepsets[key] = tuple(S)
        if not any_testable:
            break
        level += 1
    edges = {frozenset((a, b)) for a in nodes for b in adj[a]}
    return edges, sepsets


def orient(nodes, skeleton, sepsets):
    """Collider detection then Meek rules 1-4 until nothing changes."""
    g = Cpdag(list(nodes), set(), set(skeleton), dict(sepsets))
    nbrs = {v: set() for v in nodes}
    for e in skeleton:
        a, b = tuple(e)
        nbrs[a].add(b)
        nbrs[b].add(a)

    arrows = set()
    for c in sorted(nodes):
        for a, b in combinations(sorted(nbrs[c]), 2):
            if b in nbrs[a]:
                continue
            sep = sepsets.get(frozenset((a, b)), ())
            if c not in sep:
                arrows.add((a, c))
                arrows.add((b, c))
    for a, b in sorted(arrows):
        if (b, a) in arrows:
            g.conflicts.append([a, b])
    for a, b in arrows:
        if (b, a) in arrows:
            continue
        g.undirected.discard(frozenset((a, b)))
        g.directed.add((a, b))

    def und(a, b):
        return frozenset((a, b)) in g.undirected

    def direct(a, b):
        g.undirected.discard(frozenset((a, b)))
        g.directed.add((a, b))

    changed = True
    while changed:
        changed = False
        for e in sorted(g.undirected, key=sorted):
            a, b = sorted(e)
            for x, y in ((a, b), (b, a)):
                if not und(x, y):
                    break
                if _meek(g, nbrs, x, y):
                    direct(x, y)
                    changed = True
                    break
    return g.check()


def _meek(g, nbrs, a, b):
    """True if a - b should become a -> b."""
    D = g.directed
    und = lambda x, y: frozenset((x, y)) in g.undirected  # noqa: E731
    # R1: c -> a, c not adjacent to b
    for c in nbrs[a]:
        if (c, a) in D and c != b and b not in nbrs[c]:
            return True
    # R2: a -> c -> b
    for c in nbrs[a] & nbrs[b]:
        if (a, c) in D and (c, b) in D:
            return True
    # R3: a - c -> b, a - d -> b, c and d non-adjacent
    cs = [c for c in nbrs[a] & nbrs[b] if und(a, c) and (c, b) in D]
    for c, d in combinations(cs, 2):
        if d not in nbrs[c]:
            return True
    # R4: a - c, c -> d -> b, a adjacent to d, c not adjacent to b
    for c in nbrs[a]:
        if c == b or not und(a, c) or b in nbrs[c]:
            continue
        for d in nbrs[c] & nbrs[b]:
            if d in nbrs[a] and (c, d) in D and (d, b) in D:
                return True
    return False


def pc(table, alpha=st.ALPHA, max_cond=3):
    skel, sep = pc_skeleton(table, alpha, max_cond)
    return orient(table.names, skel, sep)


# evaluation

def _as_edges(predicted):
    """(directed set, undirected set of frozensets) from Cpdag, Digraph or dict."""
    if isinstance(predicted, Cpdag):
        return set(predicted.directed), set(predicted.undirected), list(predicted.nodes)
    if hasattr(predicted, "edges") and isinstance(predicted.edges, dict):
        return set(predicted.edges), set(), list(predicted.nodes)
    raise TypeError("predicted must be a Cpdag or Digraph")


def evaluate(predicted, truth, half_credit=True):
    """(accuracy, precision) of directed edges against the true DAG.

    An undirected edge whose skeleton edge is true earns half credit unless
    ``half_credit`` is False. Precision is None when nothing is predicted.
    """
    directed, undirected, nodes = _as_edges(predicted)
    if set(nodes) != set(truth.variables):
        raise ValueError("predicted and true graphs have different node sets")
    true_edges = set(map(tuple, truth.edges))
    hits = float(len(directed & true_edges))
    n_pred = len(directed)
    if half_credit:
        half = sum(1 for e in undirected if any(tuple(p) in true_edges for p in (sorted(e), sorted(e)[::-1])))
        hits += 0.5 * half
        n_pred += len(undirected)
    acc = hits / len(true_edges) if true_edges else 0.0
    prec = hits / n_pred if n_pred else None
    return acc, prec


def import_edges(obj, nodes):
    """Cpdag from an external {edges: [{cause, effect, directed}]} listing."""
    g = Cpdag(list(nodes))
    for e in obj["edges"]:
        a, b = e["cause"], e["effect"]
        if a not in nodes or b not in nodes:
            raise ValueError(f"edge {a}->{b} names an unknown node")
        if e.get("directed", True):
            g.directed.add((a, b))
        else:
            g.undirected.add(frozenset((a, b)))
    return g.check()


# benchmark

@dataclass
class BenchmarkReport:
    rows: list  # {method, dataset, accuracy, strict_accuracy, precision, n_directed, n_undirected, runtime, error}
    meta: dict = field(default_factory=dict)

    def aggregate(self):
        out = {}
        for m in sorted({r["method"] for r in self.rows}):
            rs = [r for r in self.rows if r["method"] == m and r["error"] is None]
            summ = {"n": len(rs)}
            for key in ("accuracy", "strict_accuracy", "precision", "runtime"):
                v = np.array([r[key] for r in rs if r[key] is not None], float)
                summ[key + "_mean"] = float(v.mean()) if v.size else None
                summ[key + "_std"] = float(v.std()) if v.size else None
            out[m] = summ
        return out

    def mean_accuracy(self, method):
        return self.aggregate()[method]["accuracy_mean"]

    def to_json(self):
        return {"version": REPORT_VERSION, "rows": self.rows, "aggregate": self.aggregate(),
                "meta": self.meta}

    def to_text(self):
        agg = self.aggregate()
        lines = [f"{'method':<10} {'n':>3} {'accuracy':>16} {'strict':>8} {'precision':>16}"]
        for m, s in agg.items():
            def fmt(k):
                mu, sd = s[k + "_mean"], s[k + "_std"]
                return "n/a" if mu is None else f"{mu:.3f} +- {sd:.3f}"
            strict = "n/a" if s["strict_accuracy_mean"] is None else f"{s['strict_accuracy_mean']:.3f}"
            lines.append(f"{m:<10} {s['n']:>3} {fmt('accuracy'):>16} {strict:>8} {fmt('precision'):>16}")
        return "\n".join(lines) + "\n"


def desk_suite(seed=0, n_datasets=5, n_vars=18, n_edges=36, rows=500):
    """Held-out mixed-mechanism datasets; the seed stream is disjoint from training."""
    from . import simgen

    suite = []
    for child in np.random.SeedSequence([seed, 104729]).spawn(n_datasets):
        s = int(child.generate_state(1)[0])
        dag = simgen.mixed_mechanism_dag(n_vars, n_edges, s)
        suite.append(simgen.simulate_mixed_mechanisms(dag, rows, s + 1))
    return suite


def run_benchmark(suite, methods=("pc", "calm"), checkpoint=None, alpha=st.ALPHA, max_cond=3,
                  seed=0, threads=None, external=None, time_it=True):
    """Score every method on every dataset; per-dataset failures are recorded.

    ``external`` maps method name -> {dataset index: edge-list JSON object}.
    """
    from . import discover

    rows = []
    for i, ds in enumerate(suite):
        name = f"{ds.generator}-{ds.seed}"
        for m in methods:
            t0 = time.perf_counter()
            row = {"method": m, "dataset": name, "accuracy": None, "strict_accuracy": None,
                   "precision": None, "n_directed": None, "n_undirected": None,
                   "runtime": None, "error": None}
            try:
                if m == "pc":
                    pred = pc(ds.table, alpha, max_cond)
                elif m == "calm":
                    if checkpoint is None:
                        raise ValueError("the calm method needs a checkpoint")
                    res = discover.estimate(ds.table, checkpoint,
                                            config=discover.EstimateConfig(alpha=alpha, seed=seed,
                                                                           threads=threads))
                    pred = res.dag
                elif external and m in external:
                    pred = import_edges(external[m][i], ds.table.names)
                else:
                    raise ValueError(f"unknown method {m!r}")
                acc, prec = evaluate(pred, ds.truth, half_credit=True)
                strict, _ = evaluate(pred, ds.truth, half_credit=False)
                d, u, _ = _as_edges(pred)
                row.update(accuracy=acc, strict_accuracy=strict, precision=prec,
                           n_directed=len(d), n_undirected=len(u))
            except Exception as exc:  # noqa: BLE001
                log.warning("method %s failed on %s: %s", m, name, exc)
                row["error"] = f"{type(exc).__name__}: {exc}"
            row["runtime"] = time.perf_counter() - t0 if time_it else 0.0
            rows.append(row)
    return BenchmarkReport(rows, {"alpha": alpha, "max_cond": max_cond, "seed": seed,
                                  "methods": list(methods)})


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
