"""Six-step causal graph estimation from a trained pair classifier."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import featurize as fz
from . import ssmnet
from . import stattests as st

log = logging.getLogger(__name__)

RESULT_VERSION = "calm-dag/1"


class StepError(RuntimeError):
    def __init__(self, step, exc):
        super().__init__(f"step {step}: {type(exc).__name__}: {exc}")
        self.step = step
        self.cause = exc


@dataclass
class Digraph:
    nodes: list
    edges: dict = field(default_factory=dict)  # (cause, effect) -> confidence

    def __post_init__(self):
        self.nodes = list(self.nodes)
        for (a, b), c in self.edges.items():
            if a == b:
                raise ValueError(f"self-loop on {a!r}")
            if not np.isfinite(c):
                raise ValueError(f"non-finite confidence on {a}->{b}")

    def copy(self):
        return Digraph(list(self.nodes), dict(self.edges))

    def successors(self, a):
        return sorted(b for (x, b) in self.edges if x == a)

    def is_acyclic(self):
        return find_cycle(self) is None

    def topological_order(self):
        from graphlib import CycleError, TopologicalSorter

        ts = TopologicalSorter({n: [] for n in self.nodes})
        for a, b in self.edges:
            ts.add(b, a)
        try:
            return list(ts.static_order())
        except CycleError as exc:
            raise ValueError("graph has a cycle") from exc


@dataclass
class DagResult:
    dag: Digraph
    removed_bidirectional: list = field(default_factory=list)
    removed_cycle_edges: list = field(default_factory=list)
    prefiltered_noncausal: list = field(default_factory=list)
    classified: dict = field(default_factory=dict)  # every scored pair -> confidence
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "version": RESULT_VERSION,
            "nodes": list(self.dag.nodes),
            "edges": [{"cause": a, "effect": b, "confidence": c}
                      for (a, b), c in sorted(self.dag.edges.items())],
            "removed_bidirectional": self.removed_bidirectional,
            "removed_cycle_edges": self.removed_cycle_edges,
            "prefiltered_noncausal": self.prefiltered_noncausal,
            "classified": [{"cause": a, "effect": b, "confidence": c}
                           for (a, b), c in sorted(self.classified.items())],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("version") != RESULT_VERSION:
            raise ValueError(f"unsupported result version {obj.get('version')!r}")
        dag = Digraph(obj["nodes"], {(e["cause"], e["effect"]): e["confidence"] for e in obj["edges"]})
        return cls(dag, obj["removed_bidirectional"], obj["removed_cycle_edges"],
                   obj["prefiltered_noncausal"],
                   {(e["cause"], e["effect"]): e["confidence"] for e in obj["classified"]},
                   obj["meta"])


def resolve_bidirectional(graph):
    """Keep the more confident direction of every 2-cycle; returns (graph, log)."""
    out = graph.copy()
    removed = []
    for a, b in sorted(graph.edges):
        if a > b or (b, a) not in graph.edges:
            continue
        cf, cr = graph.edges[(a, b)], graph.edges[(b, a)]
        tie = cf == cr
        drop = (b, a) if cf >= cr else (a, b)
        keep = (a, b) if drop == (b, a) else (b, a)
        del out.edges[drop]
        removed.append({"kept": list(keep), "dropped": list(drop),
                        "kept_confidence": graph.edges[keep],
                        "dropped_confidence": graph.edges[drop], "tie": tie})
    return out, removed


def find_cycle(graph):
    """First cycle met by DFS from nodes in lexicographic order, as an edge list."""
    succ = {n: [] for n in graph.nodes}
    for a, b in graph.edges:
        succ.setdefault(a, []).append(b)
        succ.setdefault(b, [])
    for v in succ:
        succ[v].sort()
    color = dict.fromkeys(succ, 0)  # 0 new, 1 on stack, 2 done
    for root in sorted(succ):
        if color[root]:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        color[root] = 1
        while stack:
            v, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[v] = 2
                stack.pop()
                path.pop()
            elif color[nxt] == 1:
                cyc = path[path.index(nxt):] + [nxt]
                return list(zip(cyc[:-1], cyc[1:]))
            elif color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(succ[nxt])))
    return None


def break_cycles(graph):
    """Repeatedly drop the least confident edge of the first cycle found."""
    out = graph.copy()
    removed = []
    while True:
        cyc = find_cycle(out)
        if cyc is None:
            return out, removed
        worst = min(cyc, key=lambda e: (out.edges[e], e))
        removed.append({"edge": list(worst), "confidence": out.edges[worst],
                        "cycle": [list(e) for e in cyc]})
        del out.edges[worst]


@dataclass
class EstimateConfig:
    alpha: float = st.ALPHA
    threshold: float = 0.5
    seed: int = 0
    threads: int | None = None


def estimate(table, checkpoint, task="full", target=None, pairs=None, config=None, backend=None):
    """Normalize, score and prefilter, classify, build, resolve, break cycles."""
    cfg = config or EstimateConfig()
    if checkpoint.schema_version != fz.SCHEMA_VERSION:
        raise StepError(3, ValueError("checkpoint score schema does not match this build"))
    try:
        norm = table.minmax_normalized()
    except Exception as exc:  # noqa: BLE001
        raise StepError(1, exc) from exc
    try:
        cands = fz.enumerate_pairs(norm, task, target=target, pairs=pairs)
        kept, dropped = fz.prefilter_pairs(norm, cands, cfg.alpha)
        scores = fz.collect_scores(norm, kept, alpha=cfg.alpha, seed=cfg.seed, threads=cfg.threads)
    except Exception as exc:  # noqa: BLE001
        raise StepError(2, exc) from exc
    try:
        conf = ssmnet.predict(checkpoint, scores, backend) if len(scores) else np.zeros(0)
    except Exception as exc:  # noqa: BLE001
        raise StepError(3, exc) from exc
    classified = {(k.cause, k.effect): float(c) for k, c in zip(scores.keys(), conf)}
    graph = Digraph(table.names, {e: c for e, c in classified.items() if c >= cfg.threshold})
    graph, bidir = resolve_bidirectional(graph)
    dag, cyc = break_cycles(graph)
    pre = [{"cause": k.cause, "effect": k.effect, "p_value": float(p), "separator": sep}
           for k, p, sep in dropped]
    return DagResult(dag, bidir, cyc, pre, classified,
                     {"threshold": cfg.threshold, "alpha": cfg.alpha, "task": task,
                      "target": target, "n_scored": len(scores)})


def export(result, fmt="dot"):
    if fmt == "json":
        return json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n"
    if fmt != "dot":
        raise ValueError(f"unknown export format {fmt!r}")
    lines = ["digraph calm {"]
    for n in sorted(result.dag.nodes):
        lines.append(f"  {_dot_id(n)};")
    for (a, b), c in sorted(result.dag.edges.items()):
        lines.append(f"  {_dot_id(a)} -> {_dot_id(b)} [label=\"{c:.4f}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _dot_id(name):
    return '"' + str(name).replace("\\", "\\\\").replace('"', '\\"') + '"'
