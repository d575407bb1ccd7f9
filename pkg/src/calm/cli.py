"""Command-line entry point: ``calm <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .table import ColumnInfo, DataTable

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "?", "n/a"})
AUTO_DISCRETE_MAX = 10
INGEST_REPORT_VERSION = "calm-ingest/1"

log = logging.getLogger("calm")


class UsageError(Exception):
    pass


class DataError(Exception):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


# ingestion

def _is_missing(cell):
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float(cell):
    try:
        return float(cell)
    except ValueError:
        return None


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(r)} cells, expected {len(header)}")
    return header, body


def ingest(csv_path, schema_path=None, schema=None):
    """Typed, imputed DataTable plus an ingestion report.

    Without a schema a column is discrete when it holds non-numeric labels,
    or integers with at most ten distinct values; other columns are
    continuous and missing cells are mean-imputed.
    """
    header, body = read_csv(csv_path)
    if schema is None and schema_path:
        schema = json.loads(Path(schema_path).read_text())
    schema = schema or {}
    col_spec = schema.get("columns", {})
    unknown = set(col_spec) - set(header)
    if unknown:
        raise DataError(f"schema names unknown columns: {sorted(unknown)}")
    default_impute = schema.get("impute", "mean")

    values = np.full((len(body), len(header)), np.nan)
    columns, report = [], {"version": INGEST_REPORT_VERSION, "rows": len(body), "columns": {}}
    for j, name in enumerate(header):
        cells = [r[j].strip() for r in body]
        spec = col_spec.get(name, {})
        miss = np.array([_is_missing(c) for c in cells])
        if miss.all():
            raise DataError(f"column {name!r} is entirely missing")
        parsed = [None if m else _parse_float(c) for c, m in zip(cells, miss)]
        numeric = all(p is not None for p, m in zip(parsed, miss) if not m)
        kind = spec.get("type")
        if kind not in (None, "continuous", "discrete"):
            raise DataError(f"column {name!r}: unknown type {kind!r}")
        if kind == "continuous" and not numeric:
            bad = next(c for c, p, m in zip(cells, parsed, miss) if not m and p is None)
            raise DataError(f"column {name!r}: cannot parse {bad!r} as a number")
        if kind is None:
            if not numeric:
                kind = "discrete"
            else:
                obs = np.array([p for p in parsed if p is not None])
                integral = np.all(obs == np.round(obs))
                kind = "discrete" if integral and len(np.unique(obs)) <= AUTO_DISCRETE_MAX else "continuous"
        if kind == "discrete":
            if numeric:
                labels = sorted({p for p in parsed if p is not None})
                code = {v: i for i, v in enumerate(labels)}
                col = [np.nan if p is None else code[p] for p in parsed]
                cats = tuple(_label(v) for v in labels)
            else:
                labels = sorted({c for c, m in zip(cells, miss) if not m})
                code = {v: i for i, v in enumerate(labels)}
                col = [np.nan if m else code[c] for c, m in zip(cells, miss)]
                cats = tuple(labels)
            values[:, j] = col
            columns.append(ColumnInfo(name, True, cats))
        else:
            values[:, j] = [np.nan if p is None else p for p in parsed]
            columns.append(ColumnInfo(name))
        report["columns"][name] = {"type": kind, "missing": int(miss.sum()),
                                   "impute": spec.get("impute", default_impute)}

    for j, name in enumerate(header):
        method = report["columns"][name]["impute"]
        if report["columns"][name]["missing"] == 0:
            continue
        if method == "mean":
            values[:, j] = _impute_mean(values[:, j], columns[j].discrete)
        elif method == "knn" or (isinstance(method, str) and method.startswith("knn")):
            k = int(col_spec.get(name, {}).get("k", schema.get("k", 5)))
            values[:, j] = _impute_knn(values, j, k, columns[j].discrete)
        elif method != "none":
            raise DataError(f"column {name!r}: unknown imputation {method!r}")
        report["columns"][name]["imputed"] = 0 if method == "none" else report["columns"][name]["missing"]
    return DataTable(values, tuple(columns), {"source": str(csv_path)}), report


def _label(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _impute_mean(col, discrete):
    obs = col[np.isfinite(col)]
    if discrete:
        vals, counts = np.unique(obs, return_counts=True)
        fill = vals[np.argmax(counts)]
    else:
        fill = obs.mean()
    return np.where(np.isfinite(col), col, fill)


def _impute_knn(values, j, k, discrete):
    """Fill column j from its k nearest rows, Euclidean on z-scored complete columns."""
    complete = [c for c in range(values.shape[1]) if c != j and np.isfinite(values[:, c]).all()]
    col = values[:, j].copy()
    miss = ~np.isfinite(col)
    if not complete:
        return _impute_mean(col, discrete)
    F = values[:, complete]
    sd = F.std(axis=0)
    F = (F - F.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    donors = np.flatnonzero(~miss)
    k = min(k, len(donors))
    for i in np.flatnonzero(miss):
        d = ((F[donors] - F[i]) ** 2).sum(axis=1)
        nn = donors[np.lexsort((donors, d))[:k]]
        if discrete:
            vals, counts = np.unique(col[nn], return_counts=True)
            col[i] = vals[np.argmax(counts)]
        else:
            col[i] = col[nn].mean()
    return col


def load_table(path, schema_path=None):
    """DataTable from a dataset CSV; uses the simulator sidecar JSON if present."""
    from . import simgen

    path = Path(path)
    side = path.with_suffix(".json")
    if schema_path is None and side.exists():
        try:
            meta = json.loads(side.read_text())
        except ValueError:
            meta = {}
        if meta.get("format") == "calm-dataset/1":
            return simgen.Dataset.load(path, side).table, None
    return ingest(path, schema_path)


# config

DEFAULTS = {
    "simulate": {"family": "suite", "vars": 20, "edges": 40, "rows": 500, "out": "dataset"},
    "collect": {"alpha": 0.05, "task": "full", "target": None, "pairs": None, "prefilter": True,
                "reversed_fraction": 0.5, "nonadjacent_fraction": 0.0},
    "train": {"val_fraction": 0.2, "epochs": 200, "patience": 10, "lr": 1e-3, "batch_size": 64,
              "d": 64, "layers": 4, "delta": 128, "gate_mode": "silu"},
    "discover": {"alpha": 0.05, "threshold": 0.5, "target": None},
    "infer": {"alpha": 0.05, "threshold": 0.5, "target": None, "pairs": None},
    "benchmark": {"datasets": 5, "vars": 18, "edges": 36, "rows": 500, "alpha": 0.05,
                  "methods": "pc,calm", "train_sets": 3, "reversed_fraction": 0.5,
                  "nonadjacent_fraction": 0.0},
}


def resolve(args, sub):
    """Flag value > config file value > built-in default."""
    conf = {}
    if getattr(args, "config", None):
        try:
            file_conf = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        conf.update({k: v for k, v in file_conf.items() if not isinstance(v, dict)})
        conf.update(file_conf.get(sub, {}))
    out = dict(DEFAULTS.get(sub, {}))
    out.update({k: v for k, v in conf.items()})
    for k, v in vars(args).items():
        if v is not None:
            out[k] = v
    if out.get("seed") is None:
        out["seed"] = 0
    return out


def _threads(cfg):
    if cfg.get("deterministic"):
        return 1
    if cfg.get("threads"):
        return int(cfg["threads"])
    env = os.environ.get("CALM_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def _pairs_arg(text):
    if not text:
        return None
    if isinstance(text, list):
        return [tuple(p) for p in text]
    out = []
    for item in text.split(","):
        a, sep, b = item.partition(":")
        if not sep:
            raise UsageError(f"pair {item!r} must look like cause:effect")
        out.append((a.strip(), b.strip()))
    return out


# subcommands

def cmd_simulate(cfg):
    from . import simgen

    ds = simgen.simulate(cfg["family"], int(cfg["vars"]), int(cfg["edges"]), int(cfg["rows"]),
                         int(cfg["seed"]))
    out = Path(cfg["out"])
    csv_path, json_path = ds.save(out.with_suffix(".csv"), out.with_suffix(".json"))
    return {"csv": str(csv_path), "truth": str(json_path)}


def cmd_collect(cfg):
    from . import featurize as fz
    from . import simgen

    threads = _threads(cfg)
    data = cfg["data"]
    truths = cfg.get("truth") or []
    if truths:
        if len(truths) != len(data):
            raise UsageError("--truth must be given once per --data file")
        sets = [simgen.Dataset.load(d, t) for d, t in zip(data, truths)]
        mat = fz.assemble_training(sets, seed=int(cfg["seed"]), threads=threads,
                                   reversed_fraction=float(cfg["reversed_fraction"]),
                                   nonadjacent_fraction=float(cfg["nonadjacent_fraction"]),
                                   alpha=float(cfg["alpha"]))
    else:
        if len(data) != 1:
            raise UsageError("unlabeled collection takes exactly one --data file")
        table, _ = load_table(data[0], cfg.get("schema"))
        table = table.minmax_normalized()
        pairs = fz.enumerate_pairs(table, cfg["task"], target=cfg.get("target"),
                                   pairs=_pairs_arg(cfg.get("pairs")))
        if cfg["prefilter"]:
            pairs, _ = fz.prefilter_pairs(table, pairs, float(cfg["alpha"]))
        mat = fz.collect_scores(table, pairs, alpha=float(cfg["alpha"]), seed=int(cfg["seed"]),
                                threads=threads)
    mat.save(cfg["out"])
    return {"records": len(mat), "out": cfg["out"]}


def cmd_train(cfg):
    from . import featurize as fz
    from . import ssmnet

    mat = fz.ScoreMatrix.load(cfg["data"])
    if cfg.get("val"):
        tr, va = mat, fz.ScoreMatrix.load(cfg["val"])
    else:
        tr, va = split_train_val(mat, float(cfg["val_fraction"]), int(cfg["seed"]))
    mc = ssmnet.ModelConfig(d=int(cfg["d"]), layers=int(cfg["layers"]), delta=int(cfg["delta"]),
                            lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                            epochs=int(cfg["epochs"]), patience=int(cfg["patience"]),
                            seed=int(cfg["seed"]), gate_mode=cfg["gate_mode"])
    ck = ssmnet.train(tr, va, mc, log_path=cfg.get("log"))
    ssmnet.save(ck, cfg["out"])
    best = ck.history[-1]["best_epoch"]
    return {"out": cfg["out"], "best_epoch": best, "epochs_run": len(ck.history) - 1,
            "best": ck.history[best]}


def split_train_val(mat, fraction, seed):
    """Stratified split with both halves label-balanced where possible."""
    from . import featurize as fz

    _, _, y = mat.arrays()
    if y is None:
        raise DataError("training scores must be labeled")
    rng = np.random.default_rng(seed)
    tr, va = [], []
    for lab in (0, 1):
        idx = np.flatnonzero(y == lab)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        va += idx[:n_val].tolist()
        tr += idx[n_val:].tolist()
    return mat.subset(sorted(tr)), (mat.subset(sorted(va)) if va else fz.ScoreMatrix([]))


def _estimate(cfg, task):
    from . import discover, ssmnet

    _result_format(cfg["out"])
    table, report = load_table(cfg["data"], cfg.get("schema"))
    ck = ssmnet.load(cfg["model"])
    ec = discover.EstimateConfig(alpha=float(cfg["alpha"]), threshold=float(cfg["threshold"]),
                                 seed=int(cfg["seed"]), threads=_threads(cfg))
    pairs = _pairs_arg(cfg.get("pairs"))
    if task == "target" and pairs:
        task = "explicit"
    res = discover.estimate(table, ck, task=task, target=cfg.get("target"), pairs=pairs, config=ec)
    if report is not None:
        res.meta["ingest"] = report
    return res


def _result_format(out):
    suffix = Path(out).suffix.lower()
    if suffix not in (".dot", ".json"):
        raise UsageError(f"--out must end in .dot or .json, got {out!r}")
    return suffix[1:]


def _write_result(res, out):
    from . import discover

    Path(out).write_text(discover.export(res, _result_format(out)))


def cmd_discover(cfg):
    res = _estimate(cfg, "target" if cfg.get("target") else "full")
    _write_result(res, cfg["out"])
    return {"out": cfg["out"], "edges": len(res.dag.edges)}


def cmd_infer(cfg):
    if not cfg.get("target") and not cfg.get("pairs"):
        raise UsageError("infer needs --target or --pairs")
    res = _estimate(cfg, "target")
    _write_result(res, cfg["out"])
    return {"out": cfg["out"], "edges": len(res.dag.edges),
            "classified": {f"{a}->{b}": c for (a, b), c in sorted(res.classified.items())}}


def cmd_benchmark(cfg):
    from . import pcbaseline as pb
    from . import ssmnet

    seed = int(cfg["seed"])
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    n_vars, n_edges = int(cfg["vars"]), int(cfg["edges"])
    suite = pb.desk_suite(seed, int(cfg["datasets"]), n_vars, n_edges, int(cfg["rows"]))
    ck = None
    if "calm" in methods:
        if cfg.get("model"):
            ck = ssmnet.load(cfg["model"])
        else:
            ck, _ = train_benchmark_model(seed, int(cfg["train_sets"]), float(cfg["reversed_fraction"]),
                                          float(cfg["nonadjacent_fraction"]), _threads(cfg))
    rep = pb.run_benchmark(suite, methods, ck, alpha=float(cfg["alpha"]), seed=seed,
                           threads=_threads(cfg))
    if cfg.get("out"):
        pb.save_report(rep, cfg["out"])
    sys.stdout.write(rep.to_text())
    return {"out": cfg.get("out"), "aggregate": rep.aggregate()}


def train_benchmark_model(seed=0, train_sets=3, reversed_fraction=0.5, nonadjacent_fraction=0.0,
                          threads=None, config=None):
    """Score disjoint synthetic training sets and fit a classifier on them.

    Returns (checkpoint, labeled score matrix).
    """
    from . import featurize as fz
    from . import simgen, ssmnet

    sets = simgen.make_training_sets(seed, n_datasets=train_sets)
    mat = fz.assemble_training(sets, seed=seed, threads=threads, reversed_fraction=reversed_fraction,
                               nonadjacent_fraction=nonadjacent_fraction)
    tr, va = split_train_val(mat, 0.2, seed)
    return ssmnet.train(tr, va, config or ssmnet.ModelConfig(seed=seed)), mat


def cmd_inspect(cfg):
    from . import ssmnet

    head = ssmnet.inspect(cfg["model"])
    head.pop("history", None) if not cfg.get("history") else None
    return head


def cmd_export_dot(cfg):
    from . import discover

    res = discover.DagResult.from_json(json.loads(Path(cfg["result"]).read_text()))
    text = discover.export(res, "dot")
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
        return {"out": cfg["out"]}
    sys.stdout.write(text)
    return None


COMMANDS = {
    "simulate": cmd_simulate, "collect": cmd_collect, "train": cmd_train,
    "discover": cmd_discover, "infer": cmd_infer, "benchmark": cmd_benchmark,
    "inspect": cmd_inspect, "export-dot": cmd_export_dot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON config; flags override it")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single worker thread")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    p = _Parser(prog="calm", description="Pairwise-score causal discovery.")
    p.add_argument("--version", action="version", version=f"calm {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset + truth")
    s.add_argument("--family", choices=["linear", "nonlinear", "mgm", "suite"], default=None)
    s.add_argument("--vars", type=int, default=None)
    s.add_argument("--edges", type=int, default=None)
    s.add_argument("--rows", type=int, default=None)
    s.add_argument("--out", default=None, help="output prefix (.csv and .json)")

    s = sub.add_parser("collect", parents=[common], help="score pairs into a score matrix")
    s.add_argument("--data", action="append", required=True)
    s.add_argument("--truth", action="append", default=None,
                   help="truth JSON per --data; yields a balanced labeled matrix")
    s.add_argument("--schema", default=None)
    s.add_argument("--task", choices=["full", "target", "explicit"], default=None)
    s.add_argument("--target", default=None)
    s.add_argument("--pairs", default=None, help="a:b,c:d")
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--no-prefilter", dest="prefilter", action="store_false", default=None)
    s.add_argument("--reversed-fraction", type=float, default=None,
                   help="share of negatives that are true edges scored backwards")
    s.add_argument("--nonadjacent-fraction", type=float, default=None,
                   help="share of negatives that are dependent pairs with no edge")
    s.add_argument("--out", required=True, help=".csv or .jsonl")

    s = sub.add_parser("train", parents=[common], help="train a classifier checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--val", default=None)
    s.add_argument("--val-fraction", type=float, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--patience", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--d", type=int, default=None)
    s.add_argument("--layers", type=int, default=None)
    s.add_argument("--delta", type=int, default=None)
    s.add_argument("--gate-mode", choices=["silu", "input"], default=None)
    s.add_argument("--log", default=None, help="training log (JSON lines)")
    s.add_argument("--out", required=True)

    for name, hlp in (("discover", "estimate a DAG over all variables (or around --target)"),
                      ("infer", "classify pairs around --target or listed --pairs")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--data", required=True)
        s.add_argument("--schema", default=None)
        s.add_argument("--model", required=True)
        s.add_argument("--target", default=None)
        if name == "infer":
            s.add_argument("--pairs", default=None, help="a:b,c:d")
        s.add_argument("--alpha", type=float, default=None)
        s.add_argument("--threshold", type=float, default=None)
        s.add_argument("--out", required=True, help=".dot or .json")

    s = sub.add_parser("benchmark", parents=[common], help="compare PC and CALM on a synthetic suite")
    s.add_argument("--datasets", type=int, default=None)
    s.add_argument("--vars", type=int, default=None)
    s.add_argument("--edges", type=int, default=None)
    s.add_argument("--rows", type=int, default=None)
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--methods", default=None)
    s.add_argument("--train-sets", type=int, default=None)
    s.add_argument("--reversed-fraction", type=float, default=None)
    s.add_argument("--nonadjacent-fraction", type=float, default=None)
    s.add_argument("--model", default=None, help="checkpoint; trained on the fly if omitted")
    s.add_argument("--out", default=None)

    s = sub.add_parser("inspect", parents=[common], help="print a checkpoint header")
    s.add_argument("model")
    s.add_argument("--history", action="store_true", default=None)

    s = sub.add_parser("export-dot", parents=[common], help="DOT from a JSON result")
    s.add_argument("--result", required=True)
    s.add_argument("--out", default=None)
    return p


def _fail(code, kind, message, step=None):
    err = {"error": kind, "message": message, "exit_code": code}
    if step is not None:
        err["step"] = step
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None):
    from . import discover, ssmnet

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = args.command
    try:
        cfg = resolve(args, sub)
        result = COMMANDS[sub](cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc), exc.step)
    except discover.StepError as exc:
        code = EXIT_DATA if isinstance(exc.cause, (ValueError, KeyError, OSError)) else EXIT_INTERNAL
        return _fail(code, type(exc.cause).__name__, str(exc), exc.step)
    except (ssmnet.CheckpointError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))
    if result is not None:
        sys.stdout.write(json.dumps(result, indent=1, sort_keys=True, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
