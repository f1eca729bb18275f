"""Multimodal transformer over GP-completed daily series and static features.

Token layout (multimodal): ``[CLS, static, day_0, ..., day_{T-1}]`` with
learned positional embeddings added after concatenation; the unimodal
variant drops the static token. Blocks are pre-norm (attention and a GELU
feed-forward, each behind a residual). The final CLS state feeds a two-layer
MLP head and a sigmoid.

Everything is float64 numpy with explicit backward passes; no autodiff.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._nn_kernels import gelu, gelu_backward, softmax, softmax_backward
from .metrics import auroc

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
PROB_CLAMP = 1e-7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    ff_dim: int = 128
    head_dim: int = 32
    dropout_rate: float = 0.1
    max_seq_len: int = 128
    mode: str = "multimodal"
    n_channels: int = 9
    n_static: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.mode not in ("multimodal", "unimodal_ts"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def multimodal(self):
        return self.mode == "multimodal"

    def seq_len(self, T):
        return T + (2 if self.multimodal else 1)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 32
    weight_decay: float = 1e-2
    early_stop_patience: int = 15
    class_weighting: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class Batch:
    ts: np.ndarray  # (B, T, C)
    static: np.ndarray  # (B, S)
    labels: np.ndarray | None = None  # (B,)

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.static = np.asarray(self.static, dtype=np.float64).reshape(self.ts.shape[0], -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.float64).ravel()
        if np.isnan(self.ts).any() or np.isnan(self.static).any():
            raise ValueError("batch contains NaN")

    def __len__(self):
        return self.ts.shape[0]

    def take(self, idx):
        return Batch(self.ts[idx], self.static[idx], None if self.labels is None else self.labels[idx])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _block_shapes(i, cfg):
    d, f = cfg.d_model, cfg.ff_dim
    p = f"b{i}."
    return {
        p + "ln1.g": (d,), p + "ln1.b": (d,),
        p + "attn.Wq": (d, d), p + "attn.bq": (d,),
        p + "attn.Wk": (d, d), p + "attn.bk": (d,),
        p + "attn.Wv": (d, d), p + "attn.bv": (d,),
        p + "attn.Wo": (d, d), p + "attn.bo": (d,),
        p + "ln2.g": (d,), p + "ln2.b": (d,),
        p + "ff.W1": (d, f), p + "ff.b1": (f,),
        p + "ff.W2": (f, d), p + "ff.b2": (d,),
    }


def param_shapes(cfg):
    d = cfg.d_model
    shapes = {"in.W": (cfg.n_channels, d), "in.b": (d,)}
    if cfg.multimodal:
        shapes.update({
            "static.W1": (cfg.n_static, cfg.ff_dim), "static.b1": (cfg.ff_dim,),
            "static.W2": (cfg.ff_dim, d), "static.b2": (d,),
        })
    shapes.update({"cls": (d,), "pos": (cfg.max_seq_len, d)})
    for i in range(cfg.n_blocks):
        shapes.update(_block_shapes(i, cfg))
    shapes.update({"head.W1": (d, cfg.head_dim), "head.b1": (cfg.head_dim,),
                   "head.W2": (cfg.head_dim, 1), "head.b2": (1,)})
    return shapes


def init_params(cfg):
    """Fan-in scaled Gaussian weights, zero biases, unit norm gains,
    N(0, 0.02^2) CLS and positional embeddings."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls", "pos"):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("W"):
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(max(shape[0], 1)), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass
class FusionModel:
    config: ModelConfig
    params: dict
    history: list = field(default_factory=list)

    @classmethod
    def initialize(cls, config):
        return cls(config, init_params(config))

    def copy(self):
        return FusionModel(self.config, {k: v.copy() for k, v in self.params.items()}, list(self.history))

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def to_json(self, extra=None):
        return {
            "format": "msfusion-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "seed": self.config.seed,
            "history": self.history,
            "params": {
                k: {
                    "shape": list(v.shape),
                    "dtype": "<f8",
                    "data": base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode("ascii"),
                }
                for k, v in self.params.items()
            },
            **({"extra": extra} if extra else {}),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("format") != "msfusion-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a supported checkpoint")
        cfg = ModelConfig(**doc["config"])
        params = {
            k: np.frombuffer(base64.b64decode(v["data"]), dtype="<f8").astype(np.float64).reshape(v["shape"])
            for k, v in doc["params"].items()
        }
        expected = param_shapes(cfg)
        for k, shape in expected.items():
            if k not in params or params[k].shape != tuple(shape):
                raise ValueError(f"checkpoint parameter {k} missing or misshapen")
        return cls(cfg, params, doc.get("history", []))

    def save(self, path, extra=None):
        Path(path).write_text(json.dumps(self.to_json(extra)))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = rstd / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def _linear(x, W, b):
    return x @ W + b


def _linear_backward(x, W, dy):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def _split_heads(x, h):
    B, L, d = x.shape
    return x.reshape(B, L, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def attention(x, p, prefix, n_heads):
    q = _split_heads(_linear(x, p[prefix + "Wq"], p[prefix + "bq"]), n_heads)
    k = _split_heads(_linear(x, p[prefix + "Wk"], p[prefix + "bk"]), n_heads)
    v = _split_heads(_linear(x, p[prefix + "Wv"], p[prefix + "bv"]), n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    probs = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    o = _merge_heads(probs @ v)
    out = _linear(o, p[prefix + "Wo"], p[prefix + "bo"])
    return out, (x, q, k, v, probs, o, scale)


def attention_backward(dout, p, prefix, cache, grads):
    x, q, k, v, probs, o, scale = cache
    h = q.shape[1]
    do, grads[prefix + "Wo"], grads[prefix + "bo"] = _linear_backward(o, p[prefix + "Wo"], dout)
    do = _split_heads(do, h)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(probs, dprobs, scale)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dt in (("q", dq), ("k", dk), ("v", dv)):
        dxi, grads[prefix + "W" + name], grads[prefix + "b" + name] = _linear_backward(
            x, p[prefix + "W" + name], _merge_heads(dt)
        )
        dx += dxi
    return dx


def _dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def assemble_sequence(batch, model):
    """Token tensor ``(B, L, d)`` and the cache needed for backprop."""
    cfg, p = model.config, model.params
    B, T, C = batch.ts.shape
    L = cfg.seq_len(T)
    if L > cfg.max_seq_len:
        raise ConfigError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    if C != cfg.n_channels:
        raise ConfigError(f"expected {cfg.n_channels} channels, got {C}")
    ts_tok = _linear(batch.ts, p["in.W"], p["in.b"])
    cls = np.broadcast_to(p["cls"], (B, 1, cfg.d_model))
    cache = {"ts_tok": ts_tok}
    parts = [cls]
    if cfg.multimodal:
        if batch.static.shape[1] != cfg.n_static:
            raise ConfigError(f"expected {cfg.n_static} static features, got {batch.static.shape[1]}")
        z1 = _linear(batch.static, p["static.W1"], p["static.b1"])
        a1, t1 = gelu(z1)
        stat_tok = _linear(a1, p["static.W2"], p["static.b2"])
        cache.update(z1=z1, a1=a1, t1=t1)
        parts.append(stat_tok[:, None, :])
    parts.append(ts_tok)
    seq = np.concatenate(parts, axis=1) + p["pos"][:L]
    return seq, cache


def _forward(batch, model, rng=None, keep=False):
    cfg, p = model.config, model.params
    x, asm = assemble_sequence(batch, model)
    rate = cfg.dropout_rate if rng is not None else 0.0
    caches = []
    for i in range(cfg.n_blocks):
        pre = f"b{i}."
        a, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        att, att_c = attention(a, p, pre + "attn.", cfg.n_heads)
        m1 = _dropout_mask(rng, att.shape, rate)
        h = x + (att if m1 is None else att * m1)
        c, ln2 = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff_in = _linear(c, p[pre + "ff.W1"], p[pre + "ff.b1"])
        z, t = gelu(ff_in)
        ff = _linear(z, p[pre + "ff.W2"], p[pre + "ff.b2"])
        m2 = _dropout_mask(rng, ff.shape, rate)
        x = h + (ff if m2 is None else ff * m2)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activation in block {i}")
        if keep:
            caches.append((ln1, att_c, m1, ln2, c, ff_in, z, t, m2))
    cls = x[:, 0, :]
    z1 = _linear(cls, p["head.W1"], p["head.b1"])
    a1, t1 = gelu(z1)
    logit = _linear(a1, p["head.W2"], p["head.b2"])[:, 0]
    if not np.all(np.isfinite(logit)):
        raise FloatingPointError("non-finite logit in head")
    cache = {"asm": asm, "blocks": caches, "x_last": x, "cls": cls, "z1": z1, "a1": a1, "t1": t1}
    return logit, cache


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(batch, model, train_mode=False, rng=None):
    """Probabilities ``(B,)``; dropout only when ``train_mode`` and an ``rng``."""
    logit, _ = _forward(batch, model, rng if train_mode else None)
    return sigmoid(logit)


def attention_maps(batch, model):
    """Per-block attention probabilities ``(B, H, L, L)`` in eval mode."""
    cfg, p = model.config, model.params
    x, _ = assemble_sequence(batch, model)
    maps = []
    for i in range(cfg.n_blocks):
        pre = f"b{i}."
        a, _ = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        att, att_c = attention(a, p, pre + "attn.", cfg.n_heads)
        maps.append(att_c[4])
        h = x + att
        c, _ = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z, _ = gelu(_linear(c, p[pre + "ff.W1"], p[pre + "ff.b1"]))
        x = h + _linear(z, p[pre + "ff.W2"], p[pre + "ff.b2"])
    return maps


def _bce(prob, y, weights):
    pc = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    B = y.size
    loss = float(np.sum(weights * per) / B)
    dprob = np.where(inside, -weights * (y / pc - (1.0 - y) / (1.0 - pc)) / B, 0.0)
    return loss, dprob


def loss_and_gradients(batch, model, rng=None, pos_weight=1.0, with_input_grads=False):
    """Mean binary cross-entropy and the gradient for every parameter.

    ``rng`` enables dropout (training); pass ``None`` for a deterministic
    evaluation. With ``with_input_grads`` the gradients also carry
    ``"input.ts"`` and ``"input.static"``.
    """
    if batch.labels is None:
        raise ValueError("labels required")
    cfg, p = model.config, model.params
    logit, cache = _forward(batch, model, rng, keep=True)
    prob = sigmoid(logit)
    y = batch.labels
    weights = np.where(y > 0.5, pos_weight, 1.0)
    loss, dprob = _bce(prob, y, weights)
    dlogit = dprob * prob * (1.0 - prob)

    g = {}
    da1, g["head.W2"], g["head.b2"] = _linear_backward(cache["a1"], p["head.W2"], dlogit[:, None])
    dz1 = gelu_backward(cache["z1"], cache["t1"], da1)
    dcls, g["head.W1"], g["head.b1"] = _linear_backward(cache["cls"], p["head.W1"], dz1)
    dx = np.zeros_like(cache["x_last"])
    dx[:, 0, :] = dcls

    for i in reversed(range(cfg.n_blocks)):
        pre = f"b{i}."
        ln1, att_c, m1, ln2, c, ff_in, z, t, m2 = cache["blocks"][i]
        dff = dx if m2 is None else dx * m2
        dz, g[pre + "ff.W2"], g[pre + "ff.b2"] = _linear_backward(z, p[pre + "ff.W2"], dff)
        dffin = gelu_backward(ff_in, t, dz)
        dc, g[pre + "ff.W1"], g[pre + "ff.b1"] = _linear_backward(c, p[pre + "ff.W1"], dffin)
        dh_ln, g[pre + "ln2.g"], g[pre + "ln2.b"] = layer_norm_backward(dc, p[pre + "ln2.g"], ln2)
        dh = dx + dh_ln
        datt = dh if m1 is None else dh * m1
        da = attention_backward(datt, p, pre + "attn.", att_c, g)
        dx_ln, g[pre + "ln1.g"], g[pre + "ln1.b"] = layer_norm_backward(da, p[pre + "ln1.g"], ln1)
        dx = dh + dx_ln

    B, L, d = dx.shape
    T = batch.ts.shape[1]
    g["pos"] = np.zeros_like(p["pos"])
    g["pos"][:L] = dx.sum(axis=0)
    g["cls"] = dx[:, 0, :].sum(axis=0)
    asm = cache["asm"]
    dts_tok = dx[:, L - T:, :]
    dts, g["in.W"], g["in.b"] = _linear_backward(batch.ts, p["in.W"], dts_tok)
    if cfg.multimodal:
        dstat = dx[:, 1, :]
        da1s, g["static.W2"], g["static.b2"] = _linear_backward(asm["a1"], p["static.W2"], dstat)
        dz1s = gelu_backward(asm["z1"], asm["t1"], da1s)
        dstatic, g["static.W1"], g["static.b1"] = _linear_backward(batch.static, p["static.W1"], dz1s)
    else:
        dstatic = np.zeros_like(batch.static)
    if with_input_grads:
        g["input.ts"] = dts
        g["input.static"] = dstatic
    return loss, g


def loss_only(batch, model, pos_weight=1.0):
    logit, _ = _forward(batch, model, None)
    prob = sigmoid(logit)
    weights = np.where(batch.labels > 0.5, pos_weight, 1.0)
    return _bce(prob, batch.labels, weights)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def predict(model, batch, batch_size=256):
    """Eval-mode probabilities; pure."""
    out = [forward(batch.take(slice(i, i + batch_size)), model) for i in range(0, len(batch), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def _decays(name):
    return name.rsplit(".", 1)[-1].startswith("W")


def train(train_batch, val_batch, model_config, train_config=None):
    """Mini-batch AdamW with decoupled weight decay.

    Returns the checkpoint with the best validation AUROC (the last epoch if
    no usable validation set) and the per-epoch history. Deterministic for a
    given ``(model_config.seed, train_config.seed)``.
    """
    tc = train_config or TrainConfig()
    y = train_batch.labels
    if y is None or y.min() == y.max():
        raise ValueError("training needs both classes")
    model = FusionModel.initialize(model_config)
    if tc.epochs <= 0:
        return model, []
    rng = np.random.default_rng(tc.seed)
    pos_weight = float((y < 0.5).sum() / max((y > 0.5).sum(), 1)) if tc.class_weighting else 1.0
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    use_val = val_batch is not None and val_batch.labels is not None and 0 < val_batch.labels.sum() < len(val_batch)
    best, best_score, since_best = model.copy(), -np.inf, 0
    history = []
    step = 0
    n = len(train_batch)
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        diverged = False
        for s in range(0, n, tc.batch_size):
            idx = order[s:s + tc.batch_size]
            try:
                loss, grads = loss_and_gradients(train_batch.take(idx), model, rng, pos_weight)
            except FloatingPointError as exc:
                log.warning("training diverged at epoch %d: %s", epoch, exc)
                diverged = True
                break
            if not math.isfinite(loss):
                diverged = True
                break
            step += 1
            total += loss * len(idx)
            c1 = 1.0 - tc.beta1**step
            c2 = 1.0 - tc.beta2**step
            for k, w in model.params.items():
                gk = grads[k]
                m[k] = tc.beta1 * m[k] + (1 - tc.beta1) * gk
                v[k] = tc.beta2 * v[k] + (1 - tc.beta2) * gk * gk
                if tc.weight_decay and _decays(k):
                    w *= 1.0 - tc.lr * tc.weight_decay
                w -= tc.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + tc.eps)
        if diverged:
            break
        record = {"epoch": epoch, "train_loss": total / n}
        if use_val:
            record["val_auroc"] = auroc(predict(model, val_batch), val_batch.labels)
            record["val_loss"] = loss_only(val_batch, model)
            score = record["val_auroc"]
        else:
            score = -record["train_loss"]
        history.append(record)
        if score > best_score:
            best, best_score, since_best = model.copy(), score, 0
        else:
            since_best += 1
            if tc.early_stop_patience and since_best >= tc.early_stop_patience:
                break
    best.history = history
    return best, history


def with_static_width(cfg, n_static, **overrides):
    return replace(cfg, n_static=n_static, **overrides)
