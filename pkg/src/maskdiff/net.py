"""A small pre-norm transformer in numpy with hand-written backpropagation.

Supports causal and bidirectional attention, the label-shift convention
(hidden state ``i`` predicts token ``i + 1``), attention-map capture and an
incremental key/value cache for causal decoding. All arithmetic is float64.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from maskdiff.core import RngStream, read_container, write_container
from maskdiff.errors import InvalidArgument, NumericError

LN_EPS = 1e-5
INIT_STD = 0.02


class AttentionMode(str, enum.Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    attention_mode: str = AttentionMode.BIDIRECTIONAL.value
    label_shift: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise InvalidArgument("d_model must be divisible by n_heads")
        AttentionMode(self.attention_mode)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        out = {"tok_emb": (self.vocab_size, d), "pos_emb": (self.max_len, d)}
        for l in range(self.n_layers):
            p = f"layers.{l}."
            out.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
                p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
            })
        out.update({"ln_f.g": (d,), "ln_f.b": (d,),
                    "out.w": (d, self.vocab_size), "out.b": (self.vocab_size,)})
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(shapes) != set(self.tensors):
            missing = set(shapes) ^ set(self.tensors)
            raise InvalidArgument(f"parameter names do not match config: {sorted(missing)[:4]}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise InvalidArgument(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self, **config_changes) -> "ModelParams":
        cfg = replace(self.config, **config_changes) if config_changes else self.config
        return ModelParams(cfg, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {"model": asdict(self.config), **(extra or {})}
        return write_container(path, self.tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        tensors, meta = read_container(path)
        cfg = ModelConfig(**meta.pop("model"))
        return cls(cfg, tensors), meta


def init_params(config: ModelConfig, rng: RngStream, std: float = INIT_STD) -> ModelParams:
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, std, size=shape)
    return ModelParams(config, tensors)


def init_from_ar(ar_params: ModelParams, rng: RngStream, mask_id: int) -> ModelParams:
    """Copy AR weights for bidirectional use; only the mask embedding is redrawn."""
    if not ar_params.all_finite():
        raise InvalidArgument("AR parameters contain non-finite values")
    if not 0 <= mask_id < ar_params.config.vocab_size:
        raise InvalidArgument("mask_id outside vocabulary")
    out = ar_params.copy(attention_mode=AttentionMode.BIDIRECTIONAL.value)
    out.tensors["tok_emb"][mask_id] = rng.normal(0.0, INIT_STD, size=ar_params.config.d_model)
    return out


# --- primitives ------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u, with_grad=False):
    """tanh-form GELU; optionally also its derivative. In-place temporaries."""
    x2 = u * u
    th = x2 * 0.044715
    th += 1.0
    th *= u
    th *= _GELU_C
    np.tanh(th, out=th)
    half = th + 1.0
    half *= 0.5
    out = u * half
    if not with_grad:
        return out
    # d/du = half + 0.5 u (1 - th^2) c (1 + 3 * 0.044715 u^2)
    np.multiply(th, th, out=th)
    np.subtract(1.0, th, out=th)
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= th
    x2 *= u
    x2 *= 0.5 * _GELU_C
    x2 += half
    return out, x2


def _softmax(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _allowed(valid, mode: AttentionMode):
    b, n = valid.shape
    allowed = np.broadcast_to(valid[:, None, None, :], (b, 1, n, n))
    if mode is AttentionMode.CAUSAL:
        allowed = allowed & np.tril(np.ones((n, n), dtype=bool))[None, None]
    return allowed


# --- forward / backward ----------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    attention: np.ndarray | None = None  # (batch, layer, head, query, key)
    cache: dict | None = None


def forward(params: ModelParams, tokens, mode=None, capture_attention: bool = False,
            valid=None, keep_cache: bool = False) -> ForwardResult:
    """Logits for every position; 1-D input gives 2-D logits."""
    cfg = params.config
    mode = AttentionMode(mode or cfg.attention_mode)
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    b, n = tokens.shape
    if n > cfg.max_len:
        raise InvalidArgument(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if n < 1:
        raise InvalidArgument("empty sequence")
    if valid is None:
        valid = np.ones((b, n), dtype=bool)
    allowed = _allowed(np.asarray(valid, dtype=bool), mode)
    h_, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    t = params.tensors

    x = t["tok_emb"][tokens] + t["pos_emb"][:n][None]
    layers, attn_maps = [], []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h1, ln1 = _ln_fwd(x, t[p + "ln1.g"], t[p + "ln1.b"])
        q = (h1 @ t[p + "wq"] + t[p + "bq"]).reshape(b, n, h_, dh).transpose(0, 2, 1, 3)
        k = (h1 @ t[p + "wk"] + t[p + "bk"]).reshape(b, n, h_, dh).transpose(0, 2, 1, 3)
        v = (h1 @ t[p + "wv"] + t[p + "bv"]).reshape(b, n, h_, dh).transpose(0, 2, 1, 3)
        s = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        a = _softmax(s)
        z = (a @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.d_model)
        x_mid = x + z @ t[p + "wo"] + t[p + "bo"]
        h2, ln2 = _ln_fwd(x_mid, t[p + "ln2.g"], t[p + "ln2.b"])
        u = h2 @ t[p + "w1"] + t[p + "b1"]
        if keep_cache:
            gu, dgu = _gelu(u, with_grad=True)
        else:
            gu = _gelu(u)
        x_out = x_mid + gu @ t[p + "w2"] + t[p + "b2"]
        if keep_cache:
            layers.append(dict(h1=h1, ln1=ln1, q=q, k=k, v=v, a=a, z=z, h2=h2, ln2=ln2, dgu=dgu, gu=gu))
        if capture_attention:
            attn_maps.append(a)
        x = x_out
    hf, lnf = _ln_fwd(x, t["ln_f.g"], t["ln_f.b"])
    logits = hf @ t["out.w"] + t["out.b"]

    attention = np.stack(attn_maps, axis=1) if capture_attention else None
    cache = dict(tokens=tokens, layers=layers, hf=hf, lnf=lnf, scale=scale) if keep_cache else None
    if single:
        logits = logits[0]
        attention = attention[0] if attention is not None else None
    return ForwardResult(logits, attention, cache)


def backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    t = params.tensors
    tokens = cache["tokens"]
    b, n = tokens.shape
    d, h_, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    scale = cache["scale"]
    g: dict[str, np.ndarray] = {}

    hf = cache["hf"]
    g["out.w"] = hf.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    g["out.b"] = dlogits.reshape(-1, cfg.vocab_size).sum(axis=0)
    dx, g["ln_f.g"], g["ln_f.b"] = _ln_bwd(dlogits @ t["out.w"].T, cache["lnf"])

    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        c = cache["layers"][l]
        # feed-forward
        df2 = dx.reshape(-1, d)
        g[p + "w2"] = c["gu"].reshape(-1, cfg.d_ff).T @ df2
        g[p + "b2"] = df2.sum(axis=0)
        du = (dx @ t[p + "w2"].T) * c["dgu"]
        du2 = du.reshape(-1, cfg.d_ff)
        g[p + "w1"] = c["h2"].reshape(-1, d).T @ du2
        g[p + "b1"] = du2.sum(axis=0)
        dmid, g[p + "ln2.g"], g[p + "ln2.b"] = _ln_bwd(du @ t[p + "w1"].T, c["ln2"])
        dx = dx + dmid
        # attention
        do = dx.reshape(-1, d)
        g[p + "wo"] = c["z"].reshape(-1, d).T @ do
        g[p + "bo"] = do.sum(axis=0)
        dz = (dx @ t[p + "wo"].T).reshape(b, n, h_, dh).transpose(0, 2, 1, 3)
        a = c["a"]
        da = dz @ c["v"].transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dz
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        h1 = c["h1"].reshape(-1, d)
        dh1 = np.zeros((b * n, d))
        for name, grad in (("q", dq), ("k", dk), ("v", dv)):
            gm = grad.transpose(0, 2, 1, 3).reshape(-1, d)
            g[p + "w" + name] = h1.T @ gm
            g[p + "b" + name] = gm.sum(axis=0)
            dh1 += gm @ t[p + "w" + name].T
        dres, g[p + "ln1.g"], g[p + "ln1.b"] = _ln_bwd(dh1.reshape(b, n, d), c["ln1"])
        dx = dx + dres

    g["tok_emb"] = np.zeros_like(t["tok_emb"])
    np.add.at(g["tok_emb"], tokens.ravel(), dx.reshape(-1, d))
    g["pos_emb"] = np.zeros_like(t["pos_emb"])
    g["pos_emb"][:n] = dx.sum(axis=0)
    return g


# --- label shift and losses ------------------------------------------------

def shift_logits(logits: np.ndarray) -> np.ndarray:
    """Row ``i`` of the result is the prediction for position ``i`` (= logits
    row ``i - 1``); row 0 has no prediction and is NaN."""
    logits = np.asarray(logits)
    if logits.shape[-2] < 2:
        raise InvalidArgument("label shift needs at least two positions")
    out = np.empty_like(logits, dtype=np.float64)
    out[..., 0, :] = np.nan
    out[..., 1:, :] = logits[..., :-1, :]
    return out


def unshift_logits(shifted: np.ndarray) -> np.ndarray:
    return np.asarray(shifted)[..., 1:, :]


def prediction_rows(n: int, shift: bool) -> np.ndarray:
    """Index of the logits row that predicts each position (-1: none)."""
    rows = np.arange(n) - 1 if shift else np.arange(n)
    return rows


@dataclass
class Batch:
    """A fully specified weighted cross-entropy objective.

    ``weights[b, j]`` multiplies ``-log p(targets[b, j])`` where the
    prediction for position ``j`` comes from row ``j - 1`` (``shift``) or row
    ``j``. Zero-weight positions are excluded.
    """
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    mode: AttentionMode
    shift: bool = True
    valid: np.ndarray | None = None


def _ce_terms(logits, batch: Batch):
    bi, ji = np.nonzero(batch.weights)
    rows = ji - 1 if batch.shift else ji
    if np.any(rows < 0):
        raise InvalidArgument("position 0 has no shifted prediction")
    sel = logits[bi, rows]
    logp = log_softmax(sel)
    tgt = batch.targets[bi, ji]
    nll = -logp[np.arange(len(tgt)), tgt]
    return bi, rows, tgt, logp, nll


def batch_loss(params: ModelParams, batch: Batch) -> float:
    logits = forward(params, batch.inputs, batch.mode, valid=batch.valid).logits
    *_, nll = _ce_terms(logits, batch)
    w = batch.weights[np.nonzero(batch.weights)]
    return float((w * nll).sum())


def loss_and_grad(params: ModelParams, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    res = forward(params, batch.inputs, batch.mode, valid=batch.valid, keep_cache=True)
    logits = res.logits
    bi, rows, tgt, logp, nll = _ce_terms(logits, batch)
    w = batch.weights[np.nonzero(batch.weights)]
    loss = float((w * nll).sum())
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    dsel = np.exp(logp)
    dsel[np.arange(len(tgt)), tgt] -= 1.0
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, (bi, rows), w[:, None] * dsel)
    return loss, backward(params, res.cache, dlogits)


def gradients(params: ModelParams, batch: Batch) -> dict[str, np.ndarray]:
    """Exact gradient of the batch objective with respect to every tensor."""
    return loss_and_grad(params, batch)[1]


def ar_batch(layouts, shift: bool = True, pad_id: int = 0) -> Batch:
    """Causal next-token objective: mean CE over each target span, averaged over the batch."""
    inputs, valid = _stack([l.array for l in layouts], pad_id)
    weights = np.zeros(inputs.shape)
    for r, l in enumerate(layouts):
        g0, g1 = l.target_span
        weights[r, g0:g1] = 1.0 / (g1 - g0) / len(layouts)
    return Batch(inputs, inputs.copy(), weights, AttentionMode.CAUSAL, shift, valid)


def diffusion_batch(layouts, masked_inputs, masks, ts, shift: bool = True, pad_id: int = 0) -> Batch:
    """Masked-diffusion objective: per sequence (1/t) x summed CE over masked
    target positions, averaged over the batch."""
    clean, valid = _stack([l.array for l in layouts], pad_id)
    inputs, _ = _stack([np.asarray(m) for m in masked_inputs], pad_id)
    weights = np.zeros(clean.shape)
    for r, (l, m, t) in enumerate(zip(layouts, masks, ts)):
        if not 0.0 < t <= 1.0:
            raise InvalidArgument(f"masking rate must be in (0, 1], got {t}")
        g0, g1 = l.target_span
        weights[r, g0:g1] = np.where(m.masked, 1.0 / t, 0.0) / len(layouts)
    return Batch(inputs, clean, weights, AttentionMode.BIDIRECTIONAL, shift, valid)


def _stack(arrays, pad_id):
    n = max(len(a) for a in arrays)
    out = np.full((len(arrays), n), pad_id, dtype=np.int64)
    valid = np.zeros((len(arrays), n), dtype=bool)
    for r, a in enumerate(arrays):
        out[r, :len(a)] = a
        valid[r, :len(a)] = True
    return out, (None if valid.all() else valid)


def loss_ar(params: ModelParams, layout, shift: bool | None = None) -> float:
    shift = params.config.label_shift if shift is None else shift
    return batch_loss(params, ar_batch([layout], shift))


def loss_diffusion(params: ModelParams, layout, masked_tokens, mask_state, t: float,
                   shift: bool | None = None) -> float:
    """1/t-weighted masked objective for one sequence; an empty mask gives 0."""
    shift = params.config.label_shift if shift is None else shift
    if not 0.0 < t <= 1.0:
        raise InvalidArgument(f"masking rate must be in (0, 1], got {t}")
    if not np.any(mask_state.masked):
        return 0.0
    return batch_loss(params, diffusion_batch([layout], [masked_tokens], [mask_state], [t], shift))


# --- incremental decoding --------------------------------------------------

class KVCache:
    """Per-layer key/value state for causal decoding of a single sequence."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.keys: list[np.ndarray] = []
        self.values: list[np.ndarray] = []
        self.length = 0

    def prefill(self, tokens) -> np.ndarray:
        """Run the prefix causally; returns logits of its last position."""
        res = forward(self.params, np.asarray(tokens)[None], AttentionMode.CAUSAL, keep_cache=True)
        self.keys = [c["k"][0] for c in res.cache["layers"]]
        self.values = [c["v"][0] for c in res.cache["layers"]]
        self.length = len(tokens)
        return res.logits[0, -1]

    def append(self, token: int) -> np.ndarray:
        """Feed one token at the next position; returns its logits row."""
        cfg = self.params.config
        t = self.params.tensors
        pos = self.length
        if pos >= cfg.max_len:
            raise InvalidArgument("sequence exceeds max_len")
        h_, dh = cfg.n_heads, cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        x = t["tok_emb"][token] + t["pos_emb"][pos]
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            h1, _ = _ln_fwd(x, t[p + "ln1.g"], t[p + "ln1.b"])
            q = (h1 @ t[p + "wq"] + t[p + "bq"]).reshape(h_, 1, dh)
            k = (h1 @ t[p + "wk"] + t[p + "bk"]).reshape(h_, 1, dh)
            v = (h1 @ t[p + "wv"] + t[p + "bv"]).reshape(h_, 1, dh)
            self.keys[l] = np.concatenate([self.keys[l], k], axis=1)
            self.values[l] = np.concatenate([self.values[l], v], axis=1)
            a = _softmax((q @ self.keys[l].transpose(0, 2, 1)) * scale)
            z = (a @ self.values[l]).reshape(cfg.d_model)
            x = x + z @ t[p + "wo"] + t[p + "bo"]
            h2, _ = _ln_fwd(x, t[p + "ln2.g"], t[p + "ln2.b"])
            x = x + _gelu(h2 @ t[p + "w1"] + t[p + "b1"]) @ t[p + "w2"] + t[p + "b2"]
        self.length += 1
        hf, _ = _ln_fwd(x, t["ln_f.g"], t["ln_f.b"])
        return hf @ t["out.w"] + t["out.b"]
