"""Pair enumeration, CI prefiltering and the fixed 33-field score vector."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import stattests as st

log = logging.getLogger(__name__)

SCHEMA_VERSION = "calm-scores/1"

FIELDS = (
    "fisherz_stat", "fisherz_bin",
    "hsic_stat", "hsic_p", "hsic_bin",
    "kci_stat", "kci_bin",
    "mv_fisherz_stat", "mv_fisherz_bin",
    "nll_cv_0.01", "nll_cv_0.05", "nll_cv_0.1", "nll_cv_bin",
    "cause_discrete", "effect_discrete",
    "mi", "cmi",
    "anm_bin",
    "lm_stat", "lm_p",
    "reset_fitted_f", "reset_exog_f", "reset_princomp_f",
    "reset_fitted_chi2", "reset_exog_chi2", "reset_princomp_chi2",
    "bic_0.1", "bic_0.5", "bic_1.0", "bic_1.5", "bic_bin",
    "dg", "dg_bin",
)
N_FIELDS = len(FIELDS)
FIELD_INDEX = {f: i for i, f in enumerate(FIELDS)}
BINARY_FIELDS = frozenset(f for f in FIELDS if f.endswith("_bin") or f.endswith("_discrete"))
P_VALUE_FIELDS = frozenset({"hsic_p", "lm_p"} | {f for f in FIELDS if f.startswith("reset_")})
SYMMETRIC_FIELDS = frozenset({
    "fisherz_stat", "fisherz_bin", "hsic_stat", "hsic_p", "hsic_bin", "kci_stat", "kci_bin",
    "mv_fisherz_stat", "mv_fisherz_bin", "mi", "cmi",
})
CLAMP_RANGE = (-0.5, 1.5)
NEGATIVE_P_THRESHOLD = 0.5


@dataclass(frozen=True, order=True)
class PairKey:
    cause: str
    effect: str
    dataset: str = ""

    def __post_init__(self):
        if self.cause == self.effect:
            raise ValueError("cause and effect must differ")

    def reversed(self):
        return PairKey(self.effect, self.cause, self.dataset)


@dataclass
class ScoreRecord:
    key: PairKey
    features: np.ndarray
    mask: np.ndarray  # True = missing
    label: int | None = None
    flags: dict = field(default_factory=dict)

    def value(self, name):
        return float(self.features[FIELD_INDEX[name]])


@dataclass
class NormalizationStats:
    schema_version: str
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def constant(self):
        return self.maxs <= self.mins

    def to_json(self):
        return {"schema_version": self.schema_version,
                "mins": [float(v) for v in self.mins], "maxs": [float(v) for v in self.maxs]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["schema_version"], np.array(obj["mins"], float), np.array(obj["maxs"], float))


@dataclass
class ScoreMatrix:
    records: list[ScoreRecord]
    schema_version: str = SCHEMA_VERSION
    normalization: NormalizationStats | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def arrays(self):
        """(features m x 33, mask m x 33, labels or None)."""
        if not self.records:
            return np.zeros((0, N_FIELDS)), np.zeros((0, N_FIELDS), bool), None
        X = np.vstack([r.features for r in self.records])
        M = np.vstack([r.mask for r in self.records])
        labels = [r.label for r in self.records]
        y = None if any(lb is None for lb in labels) else np.array(labels, dtype=float)
        return X, M, y

    def keys(self):
        return [r.key for r in self.records]

    def subset(self, idx):
        return ScoreMatrix([self.records[i] for i in idx], self.schema_version,
                           self.normalization, dict(self.meta))

    def __add__(self, other):
        if other.schema_version != self.schema_version:
            raise ValueError("cannot merge score matrices with different schema versions")
        return ScoreMatrix(self.records + other.records, self.schema_version, None, dict(self.meta))

    # serialization

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"# {self.schema_version}"])
        w.writerow(["dataset", "cause", "effect", "label", *FIELDS])
        for r in self.records:
            vals = ["" if m else repr(float(v)) for v, m in zip(r.features, r.mask)]
            w.writerow([r.key.dataset, r.key.cause, r.key.effect,
                        "" if r.label is None else str(int(r.label)), *vals])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        version = rows[0][0].lstrip("# ").strip()
        _check_version(version)
        header = rows[1]
        if tuple(header[4:]) != FIELDS:
            raise ValueError("score CSV header does not match the schema")
        recs = []
        for row in rows[2:]:
            vals = np.array([float(v) if v != "" else np.nan for v in row[4:]])
            mask = np.array([v == "" for v in row[4:]])
            label = int(row[3]) if row[3] != "" else None
            recs.append(ScoreRecord(PairKey(row[1], row[2], row[0]), vals, mask, label))
        return cls(recs, version)

    def to_jsonl(self):
        lines = [json.dumps({"schema_version": self.schema_version, "fields": list(FIELDS),
                             "normalization": self.normalization.to_json() if self.normalization else None},
                            sort_keys=True)]
        for r in self.records:
            lines.append(json.dumps({
                "dataset": r.key.dataset, "cause": r.key.cause, "effect": r.key.effect,
                "label": r.label,
                "features": [None if m else float(v) for v, m in zip(r.features, r.mask)],
                "flags": r.flags,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        _check_version(head["schema_version"])
        if tuple(head["fields"]) != FIELDS:
            raise ValueError("score JSONL fields do not match the schema")
        norm = NormalizationStats.from_json(head["normalization"]) if head.get("normalization") else None
        recs = []
        for ln in lines[1:]:
            o = json.loads(ln)
            feats = np.array([np.nan if v is None else v for v in o["features"]], dtype=float)
            mask = np.array([v is None for v in o["features"]])
            recs.append(ScoreRecord(PairKey(o["cause"], o["effect"], o["dataset"]), feats, mask,
                                    o["label"], o.get("flags", {})))
        return cls(recs, head["schema_version"], norm)

    def save(self, path):
        path = str(path)
        text = self.to_jsonl() if path.endswith(".jsonl") else self.to_csv()
        with open(path, "w") as fh:
            fh.write(text)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            text = fh.read()
        return cls.from_jsonl(text) if str(path).endswith(".jsonl") else cls.from_csv(text)


def _check_version(version):
    if version != SCHEMA_VERSION:
        raise ValueError(f"score schema {version!r} does not match {SCHEMA_VERSION!r}")


def default_threads():
    env = os.environ.get("CALM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# pairs

def enumerate_pairs(table, task="full", target=None, pairs=None, dataset=""):
    """Ordered candidate pairs for a task: "full", "target" or "explicit"."""
    names = table.names
    if task == "full":
        return [PairKey(a, b, dataset) for a, b in permutations(names, 2)]
    if task == "target":
        table.index(target)
        out = [PairKey(v, target, dataset) for v in names if v != target]
        return out + [PairKey(target, v, dataset) for v in names if v != target]
    if task == "explicit":
        out = []
        for a, b in pairs:
            table.index(a)
            table.index(b)
            out.append(PairKey(a, b, dataset))
        return out
    raise ValueError(f"unknown task {task!r}")


def _unordered(key):
    return tuple(sorted((key.cause, key.effect)))


def separation_p_values(table, a, b, allow_missing=True):
    """Fisher-z p for the empty set and every singleton {z}; {cond label: p}."""
    out = {}
    try:
        out[""] = st.fisher_z(table, a, b, (), allow_missing=allow_missing).p_value
    except st.InsufficientDataError:
        out[""] = 1.0
    for z in table.names:
        if z in (a, b):
            continue
        try:
            out[z] = st.fisher_z(table, a, b, (z,), allow_missing=allow_missing).p_value
        except st.InsufficientDataError:
            continue
    return out


def best_separator(table, a, b, pvals=None):
    """Singleton conditioning variable with the largest Fisher-z p, or None."""
    pvals = pvals if pvals is not None else separation_p_values(table, a, b)
    single = [(p, table.index(z), z) for z, p in pvals.items() if z]
    if not single:
        return None
    return max(single, key=lambda t: (t[0], -t[1]))[2]


def prefilter_pairs(table, pairs, alpha=st.ALPHA, rule="min"):
    """Split pairs into (retained, rejected) by Fisher-z over the empty set
    and every singleton conditioning set.

    rule="min" keeps a pair when any of those tests rejects independence
    (smallest p below ``alpha``). rule="max" keeps it only when all of them
    do, so one separating variable is enough to drop it. ``rejected`` is a
    list of (PairKey, deciding p, conditioning set label).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if rule not in ("min", "max"):
        raise ValueError(f"unknown prefilter rule {rule!r}")
    pick = min if rule == "min" else max
    cache = {}
    kept, dropped = [], []
    for key in pairs:
        u = _unordered(key)
        if u not in cache:
            pv = separation_p_values(table, *u)
            # ties go to the empty set
            sep = pick(pv, key=lambda z: (pv[z], (z == "") == (rule == "max")))
            cache[u] = (pv[sep], sep)
        p, sep = cache[u]
        if p < alpha:
            kept.append(key)
        else:
            dropped.append((key, p, sep))
    return kept, dropped


# scores

def _safe(fn, flags, label):
    try:
        return fn()
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        flags[label] = f"{type(exc).__name__}: {exc}"
        return None


def _symmetric_scores(table, a, b, alpha, seed):
    """Fields shared by (a, b) and (b, a); keys use the canonical order a < b."""
    out, flags = {}, {}
    sep = best_separator(table, a, b)
    cond = (sep,) if sep else ()
    r = _safe(lambda: st.fisher_z(table, a, b, (), allow_missing=False, alpha=alpha), flags, "fisherz")
    if r:
        out["fisherz_stat"], out["fisherz_bin"] = r.statistic, r.binary
    r = _safe(lambda: st.fisher_z(table, a, b, cond, allow_missing=True, alpha=alpha), flags, "mv_fisherz")
    if r:
        out["mv_fisherz_stat"], out["mv_fisherz_bin"] = r.statistic, r.binary
    r = _safe(lambda: st.hsic(table, a, b, alpha=alpha, seed=seed), flags, "hsic")
    if r:
        out["hsic_stat"], out["hsic_p"], out["hsic_bin"] = r.statistic, r.p_value, r.binary
    r = _safe(lambda: st.kci(table, a, b, cond, alpha=alpha, seed=seed), flags, "kci")
    if r:
        out["kci_stat"], out["kci_bin"] = r.statistic, r.binary
    v = _safe(lambda: st.kraskov_mi(table, a, b, seed=seed), flags, "mi")
    if v is not None:
        out["mi"] = v
    v = _safe(lambda: st.conditional_mi(table, a, b, cond, seed=seed), flags, "cmi")
    if v is not None:
        out["cmi"] = v
    if sep:
        flags["separator"] = sep
    return out, flags


def _directed_scores(table, x, y, seed):
    out, flags = {}, {}
    out["cause_discrete"], out["effect_discrete"] = st.variable_attributes(table, x, y)
    for ridge in st.CV_RIDGES:
        v = _safe(lambda: st.neg_cv_loglik(table, x, y, ridge=ridge, seed=seed), flags, f"nll_cv_{ridge}")
        if v is not None:
            out[f"nll_cv_{ridge}"] = v
    r = _safe(lambda: st.anm_direction(table, x, y, seed=seed), flags, "anm")
    if r:
        out["anm_bin"] = r.binary
    for aug in ("fitted", "exog", "princomp"):
        for test, suffix in (("F", "f"), ("chi2", "chi2")):
            res = _safe(lambda: st.reset_test(table, x, y, aug, test), flags, f"reset_{aug}_{suffix}")
            if res is not None:
                out[f"reset_{aug}_{suffix}"] = res[1]
                if aug == "fitted" and test == "chi2":
                    out["lm_stat"], out["lm_p"] = res[0], res[1]
    for lam in st.BIC_LAMBDAS:
        r = _safe(lambda: st.bic_direction(table, x, y, lam), flags, f"bic_{lam}")
        if r:
            out[f"bic_{lam}"] = r.forward
            if lam == 1.0:
                out["bic_bin"] = r.binary
    r = _safe(lambda: st.dg_score(table, x, y), flags, "dg")
    if r:
        out["dg"], out["dg_bin"] = r.forward, r.binary
    return out, flags


def collect_scores(table, pairs, alpha=st.ALPHA, seed=0, threads=None, dataset=None):
    """One fully populated ScoreRecord per ordered pair.

    Failures of individual tests are recorded in the record's mask and
    flags; a pair is never dropped. Symmetric fields are computed once per
    unordered pair. The table is min-max normalized first unless it already is.
    """
    if table.meta.get("normalized") != "minmax":
        table = table.minmax_normalized()
    pairs = list(pairs)
    threads = threads or default_threads()
    sym_cache = {}
    lock = threading.Lock()

    def sym(u):
        with lock:
            hit = sym_cache.get(u)
        if hit is not None:
            return hit
        res = _symmetric_scores(table, u[0], u[1], alpha, seed)
        with lock:
            sym_cache.setdefault(u, res)
        return res

    def score(key):
        u = _unordered(key)
        s_out, s_flags = sym(u)
        d_out, d_flags = _directed_scores(table, key.cause, key.effect, seed)
        feats = np.full(N_FIELDS, np.nan)
        mask = np.ones(N_FIELDS, dtype=bool)
        for name, v in {**s_out, **d_out}.items():
            feats[FIELD_INDEX[name]] = float(v)
            mask[FIELD_INDEX[name]] = False
        flags = {**s_flags, **d_flags}
        return ScoreRecord(PairKey(key.cause, key.effect, key.dataset if dataset is None else dataset),
                           feats, mask, None, flags)

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(score, pairs))
    else:
        records = [score(k) for k in pairs]
    _median_split(records)
    return ScoreMatrix(records, SCHEMA_VERSION, meta={"kernel_max_rows": st.KERNEL_MAX_ROWS,
                                                      "alpha": alpha})


def _median_split(records):
    """nll_cv_bin = 1 when the 0.01-ridge score is below the pair-set median."""
    i, j = FIELD_INDEX["nll_cv_0.01"], FIELD_INDEX["nll_cv_bin"]
    vals = np.array([r.features[i] for r in records if not r.mask[i]])
    if vals.size == 0:
        return
    med = float(np.median(vals))
    for r in records:
        if not r.mask[i]:
            r.features[j] = float(r.features[i] < med)
            r.mask[j] = False


# training data

class InsufficientNegativesError(ValueError):
    def __init__(self, found, required):
        super().__init__(f"only {found} independent pairs available, {required} required")
        self.found = found
        self.required = required


def independent_candidates(table, alpha_indep=NEGATIVE_P_THRESHOLD, exclude=(), dataset=""):
    """Ordered pairs whose marginal Fisher-z p exceeds ``alpha_indep``."""
    excl = {tuple(e) for e in exclude}
    excl |= {(b, a) for a, b in excl}
    pcache = {}
    out = []
    for a, b in permutations(table.names, 2):
        if (a, b) in excl:
            continue
        u = tuple(sorted((a, b)))
        if u not in pcache:
            try:
                pcache[u] = st.fisher_z(table, u[0], u[1], (), allow_missing=True).p_value
            except st.InsufficientDataError:
                pcache[u] = 0.0
        if pcache[u] > alpha_indep:
            out.append((PairKey(a, b, dataset), pcache[u]))
    return out


def generate_negatives(table, n_required, alpha_indep=NEGATIVE_P_THRESHOLD, seed=0,
                       exclude=(), dataset="", threads=None):
    """Score ``n_required`` distinct clearly independent pairs, labeled 0."""
    cands = independent_candidates(table, alpha_indep, exclude, dataset)
    if len(cands) < n_required:
        raise InsufficientNegativesError(len(cands), n_required)
    rng = np.random.default_rng(seed)
    pick = sorted(rng.choice(len(cands), size=n_required, replace=False)) if n_required else []
    keys = [cands[i][0] for i in pick]
    mat = collect_scores(table, keys, seed=seed, threads=threads)
    for r in mat.records:
        r.label = 0
    return mat


def assemble_training(datasets, seed=0, threads=None, reversed_fraction=0.0,
                      nonadjacent_fraction=0.0, alpha=st.ALPHA):
    """Balanced training matrix from simulated datasets with known truth.

    Positives are the true edges. Negatives are independent pairs (Fisher-z
    p > 0.5) by default. ``reversed_fraction`` of them are instead true
    edges scored in the wrong direction, and ``nonadjacent_fraction`` are
    pairs with no edge either way that still pass the prefilter at
    ``alpha``. When a dataset has too few non-adjacent dependent pairs the
    shortfall is filled with independent ones.
    """
    if reversed_fraction < 0 or nonadjacent_fraction < 0 or reversed_fraction + nonadjacent_fraction > 1:
        raise ValueError("negative fractions must be non-negative and sum to at most 1")
    parts = []
    for i, ds in enumerate(datasets):
        name = f"{ds.generator}-{ds.seed}"
        table = ds.table.minmax_normalized()
        truth = list(ds.truth.edges)
        pos = collect_scores(table, [PairKey(a, b, name) for a, b in truth], seed=seed, threads=threads)
        for r in pos.records:
            r.label = 1
        n = len(truth)
        rng = np.random.default_rng([seed, i])
        n_rev = int(round(reversed_fraction * n))
        hard = [PairKey(truth[k][1], truth[k][0], name)
                for k in sorted(rng.choice(n, size=n_rev, replace=False))] if n_rev else []
        n_adj = int(round(nonadjacent_fraction * n))
        if n_adj:
            linked = set(truth) | {(b, a) for a, b in truth}
            cands = [k for k in enumerate_pairs(table, dataset=name) if (k.cause, k.effect) not in linked]
            cands, _ = prefilter_pairs(table, cands, alpha)
            take = min(n_adj, len(cands))
            hard += [cands[k] for k in sorted(rng.choice(len(cands), size=take, replace=False))]
        hard_mat = collect_scores(table, hard, seed=seed, threads=threads) if hard else ScoreMatrix([])
        for r in hard_mat.records:
            r.label = 0
        neg = generate_negatives(table, n - len(hard), seed=seed + i, exclude=truth, dataset=name,
                                 threads=threads)
        parts.append(pos + hard_mat + neg)
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def fit_normalizer(matrix):
    """Per-column min/max over non-missing training values."""
    X, M, _ = matrix.arrays()
    Xm = np.where(M, np.nan, X)
    with np.errstate(all="ignore"):
        mins = np.nanmin(Xm, axis=0) if len(X) else np.zeros(N_FIELDS)
        maxs = np.nanmax(Xm, axis=0) if len(X) else np.zeros(N_FIELDS)
    mins = np.where(np.isfinite(mins), mins, 0.0)
    maxs = np.where(np.isfinite(maxs), maxs, 0.0)
    return NormalizationStats(matrix.schema_version, mins, maxs)


def apply_normalizer(matrix, stats):
    """Map non-binary columns to (v - min)/(max - min), clamped to [-0.5, 1.5].

    Constant training columns map to 0. Clamped cells are flagged per record.
    """
    if stats.schema_version != matrix.schema_version:
        raise ValueError(f"normalizer schema {stats.schema_version!r} does not match "
                         f"{matrix.schema_version!r}")
    span = stats.maxs - stats.mins
    out = []
    for r in matrix.records:
        f = r.features.copy()
        flags = dict(r.flags)
        for name, j in FIELD_INDEX.items():
            if name in BINARY_FIELDS or r.mask[j]:
                continue
            v = 0.0 if span[j] <= 0 else (f[j] - stats.mins[j]) / span[j]
            if v < CLAMP_RANGE[0] or v > CLAMP_RANGE[1]:
                flags.setdefault("clamped", []).append(name)
                v = min(max(v, CLAMP_RANGE[0]), CLAMP_RANGE[1])
            f[j] = v
        out.append(ScoreRecord(r.key, f, r.mask.copy(), r.label, flags))
    return ScoreMatrix(out, matrix.schema_version, stats, dict(matrix.meta))
