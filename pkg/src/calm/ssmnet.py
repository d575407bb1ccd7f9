"""Selective state-space classifier over per-pair score vectors.

Each score record is read as a pseudo-sequence of J feature tokens. Tokens
are embedded (vocabulary lookup for binary fields, piecewise-linear bin
encoding for numeric ones), passed through a stack of gated selective-SSM
blocks along the feature axis, average-pooled and mapped to one logit.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import featurize as fz
from . import ndgrad as ng

log = logging.getLogger(__name__)

MAGIC = b"CALMCKPT"
FORMAT_VERSION = 1
UNK = "<UNK>"


class CheckpointError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 4
    expansion: int = 2
    conv_kernel: int = 4
    delta: int = 128
    pooling: str = "average"
    n_features: int = fz.N_FIELDS
    max_bins: int = 16
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int = 10
    seed: int = 0
    gate_mode: str = "silu"  # "silu": silu(x W_g); "input": raw block input
    residual: bool = True
    weight_decay: float = 0.0
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("d", "layers", "expansion", "conv_kernel", "delta", "n_features",
                     "max_bins", "batch_size", "epochs", "patience"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pooling != "average":
            raise ValueError("only average pooling is supported")
        if self.gate_mode not in ("silu", "input"):
            raise ValueError("gate_mode must be 'silu' or 'input'")

    @property
    def inner(self):
        return self.d * self.expansion

    @property
    def token_width(self):
        # PLE slots + one missing-indicator slot; also fits the {0, 1, UNK} one-hot
        return max(self.max_bins + 1, 3)

    @classmethod
    def from_dict(cls, obj):
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# encoders

@dataclass
class Encoders:
    """Per-field token encoders; ``kinds[j]`` is "categorical" or "numeric"."""

    fields: tuple
    kinds: tuple
    vocabularies: dict = field(default_factory=dict)  # field -> {value repr: index}
    boundaries: dict = field(default_factory=dict)  # field -> sorted boundaries
    width: int = 17

    def to_json(self):
        return {"fields": list(self.fields), "kinds": list(self.kinds),
                "vocabularies": self.vocabularies,
                "boundaries": {k: [float(b) for b in v] for k, v in self.boundaries.items()},
                "width": self.width}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["fields"]), tuple(obj["kinds"]), dict(obj["vocabularies"]),
                   {k: np.array(v, float) for k, v in obj["boundaries"].items()}, int(obj["width"]))

    def encode_arrays(self, X, M, fields=None):
        """Token input tensor P (N, J, width) from feature and mask arrays.

        ``fields`` names the columns of X when they are not in encoder
        order; tokens are always emitted in encoder order.
        """
        X = np.asarray(X, float)
        M = np.asarray(M, bool)
        if fields is not None:
            pos = {f: i for i, f in enumerate(fields)}
            if set(pos) != set(self.fields):
                raise ValueError("column names do not match the encoder fields")
            order = [pos[f] for f in self.fields]
            X, M = X[:, order], M[:, order]
        N, J = X.shape
        if J != len(self.fields):
            raise ValueError(f"expected {len(self.fields)} features, got {J}")
        P = np.zeros((N, J, self.width))
        for j, (name, kind) in enumerate(zip(self.fields, self.kinds)):
            if kind == "categorical":
                vocab = self.vocabularies[name]
                unk = vocab[UNK]
                idx = np.array([unk if m else vocab.get(_vkey(v), unk) for v, m in zip(X[:, j], M[:, j])])
                P[np.arange(N), j, idx] = 1.0
            else:
                b = self.boundaries[name]
                P[:, j, :len(b) - 1] = ple(np.where(M[:, j], b[0], X[:, j]), b)
                P[M[:, j], j, : len(b) - 1] = 0.0
                P[:, j, self.width - 1] = M[:, j]
        return P


def _vkey(v):
    return repr(float(v))


def ple(values, boundaries):
    """Piecewise-linear bin encoding: full bins 1, containing bin fractional, rest 0."""
    values = np.asarray(values, float)
    b = np.asarray(boundaries, float)
    if b.size < 2:
        return np.zeros(values.shape + (0,))
    lo, hi = b[:-1], b[1:]
    return np.clip((values[..., None] - lo) / (hi - lo), 0.0, 1.0)


def tree_boundaries(x, y, max_bins=16):
    """Bin edges from a single-feature regression tree of x against y."""
    from sklearn.tree import DecisionTreeRegressor

    x = np.asarray(x, float)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.array([lo])
    depth = max(1, int(math.floor(math.log2(max_bins))))
    tree = DecisionTreeRegressor(max_depth=depth, max_leaf_nodes=max_bins, random_state=0)
    tree.fit(x[:, None], np.asarray(y, float))
    t = tree.tree_
    cuts = np.sort(t.threshold[t.feature >= 0])
    edges = np.unique(np.concatenate([[lo], cuts[(cuts > lo) & (cuts < hi)], [hi]]))
    return edges


def fit_encoders(matrix, max_bins=16):
    """Vocabularies for binary fields, tree bins for numeric ones."""
    X, M, y = matrix.arrays()
    if len(X) == 0:
        raise ValueError("cannot fit encoders on an empty training set")
    if y is None:
        raise ValueError("fit_encoders needs labeled records")
    kinds, vocabs, bounds = [], {}, {}
    for j, name in enumerate(fz.FIELDS):
        obs = X[~M[:, j], j]
        if name in fz.BINARY_FIELDS:
            kinds.append("categorical")
            vals = sorted({_vkey(v) for v in obs} | {_vkey(0.0), _vkey(1.0)}, key=float)
            vocab = {v: i for i, v in enumerate(vals)}
            vocab[UNK] = len(vals)
            vocabs[name] = vocab
        else:
            kinds.append("numeric")
            bounds[name] = tree_boundaries(obs, y[~M[:, j]], max_bins) if obs.size else np.array([0.0])
    width = max(max_bins + 1, max(len(v) for v in vocabs.values()) if vocabs else 0)
    return Encoders(fz.FIELDS, tuple(kinds), vocabs, bounds, width)


# parameters

def _param_specs(cfg, width):
    d, D, S, K, J = cfg.d, cfg.inner, cfg.delta, cfg.conv_kernel, cfg.n_features
    specs = [("enc_W", (J, width, d)), ("enc_b", (J, d))]
    for i in range(cfg.layers):
        p = f"l{i}."
        specs += [
            (p + "W_in", (d, D)), (p + "b_in", (D,)),
            (p + "W_g", (d, D)), (p + "b_g", (D,)),
            (p + "conv_w", (D, K)), (p + "conv_b", (D,)),
            (p + "W_dt", (D, D)), (p + "b_dt", (D,)),
            (p + "W_B", (D, S)), (p + "W_C", (D, S)),
            (p + "A_log", (D, S)), (p + "alpha", (D,)),
            (p + "W_out", (D, d)), (p + "b_out", (d,)),
        ]
    specs += [("W_head", (d, 1)), ("b_head", (1,))]
    return specs


def init_params(cfg, width, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, D, S, K = cfg.d, cfg.inner, cfg.delta, cfg.conv_kernel
    params = {}
    for name, shape in _param_specs(cfg, width):
        base = name.split(".")[-1]
        if base == "enc_W":
            v = rng.normal(0, 1.0 / math.sqrt(width), shape)
        elif base in ("enc_b", "b_in", "b_g", "conv_b", "b_out", "b_head"):
            v = np.zeros(shape)
        elif base == "conv_w":
            v = rng.uniform(-1, 1, shape) / math.sqrt(K)
        elif base == "b_dt":
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), shape))
            v = dt + np.log(-np.expm1(-dt))  # inverse softplus
        elif base == "A_log":
            v = np.log(np.broadcast_to(np.arange(1, S + 1, dtype=float), shape)).copy()
        elif base == "alpha":
            v = np.ones(shape)
        elif base == "W_out":
            v = rng.normal(0, 1.0 / math.sqrt(D), shape) / math.sqrt(cfg.layers)
        elif base == "W_head":
            v = rng.normal(0, 1.0 / math.sqrt(d), shape)
        else:
            v = rng.normal(0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = np.ascontiguousarray(v, dtype=np.float64)
    return params


# network

def _linear(x, W, b=None):
    """(..., a) @ (a, c) + b via a 2-D matmul."""
    lead = x.shape[:-1]
    out = ng.matmul(ng.reshape(x, (-1, x.shape[-1])) if len(lead) != 1 else x, W)
    if b is not None:
        out = out + b
    return ng.reshape(out, lead + (W.shape[-1],)) if len(lead) != 1 else out


def encode(P, enc_W, enc_b):
    """Z[n, j] = P[n, j] @ enc_W[j] + enc_b[j]; returns (N, J, d)."""
    Pt = ng.transpose(P, (1, 0, 2))  # (J, N, B)
    Z = ng.matmul(Pt, enc_W)  # (J, N, d)
    return ng.transpose(Z, (1, 0, 2)) + enc_b


def causal_conv(x, w, b):
    """Depthwise causal convolution along axis 1; w (C, K), b (C,)."""
    N, J, C = x.shape
    K = w.shape[1]
    xp = ng.concat([ng.Tensor(np.zeros((N, K - 1, C))), x], axis=1) if K > 1 else x
    out = None
    for k in range(K):
        term = ng.slice_(xp, (slice(None), slice(k, k + J))) * ng.slice_(w, (slice(None), k))
        out = term if out is None else out + term
    return out + b


def ssm_scan(u, Wdt, bdt, WB, WC, A_log, alpha, backend=None):
    """Selective scan with input-dependent step, input and output maps."""
    delta = ng.softplus(_linear(u, Wdt, bdt))
    B = _linear(u, WB)
    C = _linear(u, WC)
    A = -ng.exp(A_log)
    return ng.selective_scan(u, delta, A, B, C, backend=backend) + u * alpha


def block_forward(x, p, prefix, cfg, backend=None):
    g = lambda n: p[prefix + n]  # noqa: E731
    h = _linear(x, g("W_in"), g("b_in"))
    u = ng.silu(causal_conv(h, g("conv_w"), g("conv_b")))
    y = ssm_scan(u, g("W_dt"), g("b_dt"), g("W_B"), g("W_C"), g("A_log"), g("alpha"), backend)
    if cfg.gate_mode == "silu":
        gate = ng.silu(_linear(x, g("W_g"), g("b_g")))
    else:
        gate = ng.concat([x] * cfg.expansion, axis=2)
    out = _linear(y * gate, g("W_out"), g("b_out"))
    return x + out if cfg.residual else out


def forward(P, params, cfg, backend=None):
    """Logits (N,) from token inputs P (N, J, width); params map name -> Tensor."""
    z = encode(P, params["enc_W"], params["enc_b"])
    for i in range(cfg.layers):
        z = block_forward(z, params, f"l{i}.", cfg, backend)
    pooled = ng.mean_axis(z, axis=1)
    return ng.reshape(ng.matmul(pooled, params["W_head"]), (P.shape[0],)) + params["b_head"]


def bce_loss(logits, labels):
    """Mean binary cross-entropy in the form softplus(l) - y l."""
    labels = np.asarray(labels, float)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return ng.mean_axis(ng.softplus(logits) - logits * labels)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# checkpoint

@dataclass
class Checkpoint:
    config: ModelConfig
    encoders: Encoders
    params: dict
    normalization: fz.NormalizationStats | None = None
    optimizer: dict = field(default_factory=dict)  # {"step": int, "m": {...}, "v": {...}}
    log_digest: str = ""
    history: list = field(default_factory=list)
    schema_version: str = fz.SCHEMA_VERSION

    def header(self):
        return {
            "format_version": FORMAT_VERSION,
            "schema_version": self.schema_version,
            "config": asdict(self.config),
            "encoders": self.encoders.to_json(),
            "normalization": self.normalization.to_json() if self.normalization else None,
            "optimizer_step": int(self.optimizer.get("step", 0)),
            "log_digest": self.log_digest,
            "history": self.history,
            "blobs": [[name, list(shape)] for name, shape in self._blob_layout()],
        }

    def _blob_layout(self):
        out = [(n, self.params[n].shape) for n in self.params]
        for moment in ("m", "v"):
            for n, arr in self.optimizer.get(moment, {}).items():
                out.append((f"opt.{moment}.{n}", arr.shape))
        return out

    def _blob(self, name):
        if name.startswith("opt."):
            _, moment, pname = name.split(".", 2)
            return self.optimizer[moment][pname]
        return self.params[name]

    def to_bytes(self):
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        buf.write(head)
        for name, _ in self._blob_layout():
            buf.write(np.ascontiguousarray(self._blob(name), dtype="<f8").tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw):
        head, offset = _read_header(raw, verify=True)
        config = ModelConfig.from_dict(head["config"])
        params, opt = {}, {"step": head["optimizer_step"], "m": {}, "v": {}}
        for name, shape in head["blobs"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
            arr = arr.reshape(shape)
            offset += 8 * count
            if name.startswith("opt."):
                _, moment, pname = name.split(".", 2)
                opt[moment][pname] = arr
            else:
                params[name] = arr
        if offset != len(raw) - 32:
            raise CheckpointError("checkpoint length does not match its header")
        norm = fz.NormalizationStats.from_json(head["normalization"]) if head["normalization"] else None
        return cls(config, Encoders.from_json(head["encoders"]), params, norm, opt,
                   head["log_digest"], head["history"], head["schema_version"])

    def predict_logits(self, matrix, backend=None):
        if matrix.schema_version != self.schema_version:
            raise ValueError(f"score schema {matrix.schema_version!r} does not match "
                             f"checkpoint schema {self.schema_version!r}")
        if self.normalization is not None and matrix.normalization is None:
            matrix = fz.apply_normalizer(matrix, self.normalization)
        X, M, _ = matrix.arrays()
        if len(X) == 0:
            return np.zeros(0)
        P = self.encoders.encode_arrays(X, M)
        tens = {k: ng.Tensor(v) for k, v in self.params.items()}
        out = []
        for lo in range(0, len(P), 256):
            out.append(forward(ng.Tensor(P[lo:lo + 256]), tens, self.config, backend).data)
        return np.concatenate(out)


def _read_header(raw, verify=True):
    if len(raw) < len(MAGIC) + 12 + 32:
        raise CheckpointError("checkpoint is truncated")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    if verify and hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    start = len(MAGIC) + 12
    if start + hlen > len(raw):
        raise CheckpointError("checkpoint header is truncated")
    try:
        head = json.loads(raw[start:start + hlen])
    except ValueError:
        raise CheckpointError("checkpoint header is not valid JSON") from None
    return head, start + hlen


def save(checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint.to_bytes())


def load(path):
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


def inspect(path):
    """Header of a checkpoint file without decoding the weights."""
    with open(path, "rb") as fh:
        prefix = fh.read(len(MAGIC) + 12)
        if len(prefix) < len(MAGIC) + 12 or prefix[:len(MAGIC)] != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        version, hlen = struct.unpack_from("<IQ", prefix, len(MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        body = fh.read(hlen)
    if len(body) != hlen:
        raise CheckpointError("checkpoint header is truncated")
    return json.loads(body)


# training

def _adam_step(params, grads, state, lr, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0):
    state["step"] += 1
    t = state["step"]
    for k, g in grads.items():
        if weight_decay:
            g = g + weight_decay * params[k]
        m = state["m"][k] = b1 * state["m"][k] + (1 - b1) * g
        v = state["v"][k] = b2 * state["v"][k] + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        params[k] = params[k] - lr * mh / (np.sqrt(vh) + eps)


def loss_and_grads(P, labels, params, cfg, backend=None):
    tens = {k: ng.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with ng.GradTape() as tape:
        loss = bce_loss(forward(ng.Tensor(P), tens, cfg, backend), labels)
    grads = ng.backward(loss, tape)
    return float(loss.data), {k: grads.get(t, np.zeros_like(params[k])) for k, t in tens.items()}


def _evaluate(P, y, params, cfg, backend=None):
    tens = {k: ng.Tensor(v) for k, v in params.items()}
    logits = np.concatenate([forward(ng.Tensor(P[i:i + 256]), tens, cfg, backend).data
                             for i in range(0, len(P), 256)])
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    acc = float(np.mean((logits >= 0) == (y == 1)))
    return loss, acc


def train(train_matrix, val_matrix, config=None, backend=None, log_path=None):
    """Adam on mean BCE with early stopping on validation loss.

    Raw score matrices are min-max normalized with statistics fitted on the
    training matrix. The returned checkpoint holds the best-validation
    weights and the optimizer state at that point.
    """
    cfg = config or ModelConfig()
    if len(train_matrix) == 0:
        raise ValueError("empty training matrix")
    stats = train_matrix.normalization or fz.fit_normalizer(train_matrix)
    tr = train_matrix if train_matrix.normalization else fz.apply_normalizer(train_matrix, stats)
    va = val_matrix if val_matrix.normalization else fz.apply_normalizer(val_matrix, stats)
    enc = fit_encoders(tr, cfg.max_bins)
    Xt, Mt, yt = tr.arrays()
    Xv, Mv, yv = va.arrays()
    if yt is None or (len(va) and yv is None):
        raise ValueError("training and validation records must be labeled")
    Pt, Pv = enc.encode_arrays(Xt, Mt), enc.encode_arrays(Xv, Mv) if len(va) else None

    params = init_params(cfg, enc.width)
    state = {"step": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
             "v": {k: np.zeros_like(v) for k, v in params.items()}}
    rng = np.random.default_rng(cfg.seed)
    best = (math.inf, None, None, 0)
    history = []
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(Pt))
        tot = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = loss_and_grads(Pt[idx], yt[idx], params, cfg, backend)
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
            _adam_step(params, grads, state, cfg.lr, weight_decay=cfg.weight_decay)
            tot += loss * len(idx)
        entry = {"epoch": epoch, "train_loss": tot / len(Pt)}
        if Pv is not None:
            vl, vacc = _evaluate(Pv, yv, params, cfg, backend)
            entry.update(val_loss=vl, val_accuracy=vacc)
        else:
            vl = entry["train_loss"]
        history.append(entry)
        log.debug("epoch %d %s", epoch, entry)
        if vl < best[0] - 1e-12:
            best = (vl, {k: v.copy() for k, v in params.items()},
                    {"step": state["step"], "m": {k: v.copy() for k, v in state["m"].items()},
                     "v": {k: v.copy() for k, v in state["v"].items()}}, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    lines = "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)
    if log_path:
        with open(log_path, "w") as fh:
            fh.write(lines)
    digest = hashlib.sha256(lines.encode()).hexdigest()
    hist = history + [{"best_epoch": best[3]}]
    return Checkpoint(cfg, enc, best[1], stats, best[2], digest, hist)


def predict(checkpoint, matrix, backend=None):
    """Per-record confidence sigmoid(logit)."""
    return _sigmoid(checkpoint.predict_logits(matrix, backend))
