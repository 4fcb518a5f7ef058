"""Confidence-scheduled iterative unmasking and autoregressive baselines."""
from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from maskdiff import kernels
from maskdiff.core import RngStream, SequenceLayout, Vocab, linear_schedule
from maskdiff.errors import InvalidArgument
from maskdiff.net import AttentionMode, KVCache, ModelParams, forward

# Speed/quality constants adopted from a 300-trial hyperparameter search.
DEFAULT_TEMPERATURE = 0.986
DEFAULT_TOP_P = 0.586
DEFAULT_CONFIDENCE_TEMPERATURE = 0.424


class ConfidenceKind(str, enum.Enum):
    TOP_K_MARGIN = "top_k_margin"
    MAX_PROB = "max_prob"
    NEG_ENTROPY = "neg_entropy"


@dataclass(frozen=True)
class DecodeConfig:
    steps: int = 16
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    confidence_temperature: float = DEFAULT_CONFIDENCE_TEMPERATURE
    confidence_kind: str = ConfidenceKind.TOP_K_MARGIN.value
    t_floor: float = 0.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument("steps must be a positive integer")
        if self.temperature <= 0 or self.confidence_temperature <= 0:
            raise InvalidArgument("temperatures must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise InvalidArgument("top_p must lie in (0, 1]")
        ConfidenceKind(self.confidence_kind)


@dataclass
class DecodeTrace:
    unmask_step: np.ndarray  # per target position
    step_counts: list[int]
    forward_pass_count: int
    wall_time: float
    step_costs: list[int] = field(default_factory=list)  # positions processed per pass

    def to_json(self) -> str:
        d = asdict(self)
        d["unmask_step"] = [int(s) for s in self.unmask_step]
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "DecodeTrace":
        d = json.loads(text)
        d["unmask_step"] = np.asarray(d["unmask_step"], dtype=np.int64)
        return cls(**d)

    def rows(self) -> list[dict]:
        return [{"position": j, "unmask_step": int(s)} for j, s in enumerate(self.unmask_step)]


# --- scoring and sampling --------------------------------------------------

def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def confidence(probs, kind=ConfidenceKind.TOP_K_MARGIN):
    """Higher-is-better score of a probability vector (or rows of vectors)."""
    kind = ConfidenceKind(kind)
    p = np.asarray(probs, dtype=np.float64)
    if kind is ConfidenceKind.TOP_K_MARGIN:
        if p.shape[-1] < 2:
            raise InvalidArgument("top-k margin needs at least two candidates")
        top2 = np.partition(p, -2, axis=-1)[..., -2:]
        return top2[..., 1] - top2[..., 0]
    if kind is ConfidenceKind.MAX_PROB:
        return p.max(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


def top_p_sample(logits, temperature: float, top_p: float, rng: RngStream) -> int:
    probs = softmax(np.asarray(logits, dtype=np.float64) / temperature)
    return int(kernels.top_p_rows(probs[None], top_p, np.array([rng.random()]))[0])


def unmask_count(n_masked: int, t_now: float, t_next: float, final: bool) -> int:
    """floor(|M| (1 - t_next / t_now)), at least 1 while masks remain; everything on the last step."""
    if n_masked == 0:
        return 0
    if final or t_now <= 0:
        return n_masked
    # 1e-9 absorbs binary rounding of exact schedule ratios (e.g. 6 * (1 - 0.5/0.75))
    k = math.floor(n_masked * (1.0 - t_next / t_now) + 1e-9)
    return min(n_masked, max(1, k))


def schedule_counts(n_masked: int, steps: int, t_floor: float = 0.0) -> list[int]:
    levels = linear_schedule(steps, t_floor).levels
    out, m = [], n_masked
    for k in range(steps):
        c = unmask_count(m, levels[k], levels[k + 1], k == steps - 1)
        out.append(c)
        m -= c
    return out


# --- iterative unmasking ---------------------------------------------------

def _unmask_loop(params: ModelParams, tokens: np.ndarray, masked: np.ndarray, vocab: Vocab,
                 config: DecodeConfig, rng: RngStream, valid=None):
    """Batch Algorithm-1 loop over absolute positions flagged in ``masked``."""
    tokens = tokens.copy()
    masked = masked.copy()
    b, n = tokens.shape
    tokens[masked] = vocab.mask_id
    s0, s1 = vocab.speech_range
    shift = params.config.label_shift
    levels = linear_schedule(config.steps, config.t_floor).levels
    steps_at = np.full((b, n), -1, dtype=np.int64)
    counts = np.zeros((b, config.steps), dtype=np.int64)
    start = time.perf_counter()
    for k in range(config.steps):
        logits = forward(params, tokens, AttentionMode.BIDIRECTIONAL, valid=valid).logits
        bi, ji = np.nonzero(masked)
        if len(bi) == 0:
            continue
        rows = ji - 1 if shift else ji
        sel = logits[bi, rows, s0:s1]
        cand = kernels.top_p_rows(softmax(sel / config.temperature), config.top_p,
                                  rng.random(len(bi))) + s0
        conf = confidence(softmax(sel / config.confidence_temperature), config.confidence_kind)
        for r in range(b):
            idx = np.nonzero(bi == r)[0]
            if len(idx) == 0:
                continue
            c = unmask_count(len(idx), levels[k], levels[k + 1], k == config.steps - 1)
            order = idx[np.lexsort((ji[idx], -conf[idx]))][:c]
            tokens[r, ji[order]] = cand[order]
            masked[r, ji[order]] = False
            steps_at[r, ji[order]] = k
            counts[r, k] = c
    wall = time.perf_counter() - start
    return tokens, steps_at, counts, wall


def _padded(tokens: np.ndarray, pad_to: int | None, pad_id: int):
    if pad_to is None or pad_to == len(tokens):
        return tokens, None
    if pad_to < len(tokens):
        raise InvalidArgument(f"pad_to={pad_to} is shorter than the layout ({len(tokens)})")
    valid = np.zeros(pad_to, dtype=bool)
    valid[:len(tokens)] = True
    out = np.full(pad_to, pad_id, dtype=np.int64)
    out[:len(tokens)] = tokens
    return out, valid


def constrained_diffuse_decode(params: ModelParams, layout: SequenceLayout, mask_set, vocab: Vocab,
                               config: DecodeConfig, rng: RngStream, pad_to: int | None = None):
    """Regenerate the target positions in ``mask_set`` (target-relative
    indices); every other position is frozen. Returns (tokens, trace).

    ``pad_to`` runs every pass on a fixed-length buffer (padding keys are
    excluded from attention), so cost does not depend on the layout length.
    """
    g0, g1 = layout.target_span
    mask_set = sorted({int(j) for j in mask_set})
    if any(not 0 <= j < g1 - g0 for j in mask_set):
        raise InvalidArgument("mask set must lie inside the target span")
    tokens = layout.array
    if not mask_set:
        return tokens.copy(), DecodeTrace(np.full(g1 - g0, -1), [0] * config.steps, 0, 0.0)
    masked = np.zeros(len(tokens), dtype=bool)
    masked[[g0 + j for j in mask_set]] = True
    buf, valid = _padded(tokens, pad_to, vocab.pad_id)
    masked = np.concatenate([masked, np.zeros(len(buf) - len(tokens), dtype=bool)])
    out, steps_at, counts, wall = _unmask_loop(params, buf[None], masked[None], vocab, config, rng,
                                               None if valid is None else valid[None])
    trace = DecodeTrace(steps_at[0, g0:g1], [int(c) for c in counts[0]], config.steps, wall,
                        [len(buf)] * config.steps)
    return out[0, :len(tokens)], trace


def diffuse_decode(params: ModelParams, layout: SequenceLayout, vocab: Vocab, config: DecodeConfig,
                   rng: RngStream, pad_to: int | None = None):
    """Generate the whole target span from all-mask in ``config.steps`` passes."""
    return constrained_diffuse_decode(params, layout, range(layout.target_len), vocab, config, rng,
                                      pad_to)


def diffuse_decode_batch(params: ModelParams, layouts: list[SequenceLayout], vocab: Vocab,
                         config: DecodeConfig, rng: RngStream):
    """Decode several equal-length layouts with one forward pass per step for the batch."""
    if len({len(l) for l in layouts}) != 1 or len({l.target_span for l in layouts}) != 1:
        raise InvalidArgument("batched decoding needs identical layout geometry")
    tokens = np.stack([l.array for l in layouts])
    g0, g1 = layouts[0].target_span
    masked = np.zeros(tokens.shape, dtype=bool)
    masked[:, g0:g1] = True
    out, steps_at, counts, wall = _unmask_loop(params, tokens, masked, vocab, config, rng)
    traces = [DecodeTrace(steps_at[r, g0:g1], [int(c) for c in counts[r]], config.steps,
                          wall / len(layouts), [tokens.shape[1]] * config.steps)
              for r in range(len(layouts))]
    return out, traces


# --- autoregressive baselines ----------------------------------------------

def ar_decode(params: ModelParams, layout: SequenceLayout, vocab: Vocab, cached: bool,
              temperature: float = DEFAULT_TEMPERATURE, top_p: float = DEFAULT_TOP_P,
              rng: RngStream | None = None):
    """Left-to-right sampling of the target span with a causal model.

    ``cached=False`` reruns the whole prefix for every token; ``cached=True``
    keeps per-layer keys/values. Both consume the stream identically.
    """
    rng = rng or RngStream(0)
    g0, g1 = layout.target_span
    s0, s1 = vocab.speech_range
    tokens = layout.array.copy()
    tokens[g0:g1] = vocab.mask_id
    costs = []
    start = time.perf_counter()
    cache = KVCache(params) if cached else None
    for j in range(g0, g1):
        if cached:
            if j == g0:
                row = cache.prefill(tokens[:g0])
                costs.append(g0)
            else:
                row = cache.append(int(tokens[j - 1]))
                costs.append(1)
        else:
            row = forward(params, tokens[:j], AttentionMode.CAUSAL).logits[-1]
            costs.append(j)
        tokens[j] = top_p_sample(row[s0:s1], temperature, top_p, rng) + s0
    wall = time.perf_counter() - start
    n = g1 - g0
    trace = DecodeTrace(np.arange(n), [1] * n, n, wall, costs)
    return tokens, trace
