"""Exact information-theoretic oracles on enumerable chain processes.

Two independent quantities are computed from the full joint table:

* forward dependence ``eps = max_{i, S} I(x_i; X_{>i} | X_S)`` with ``S`` any
  subset of the positions before ``i``;
* the expected KL gap between the optimal predictor that sees revealed
  context on both sides and the one that sees only the revealed left
  context, when every other position is revealed with probability ``1 - tau``.

The gap never exceeds ``eps``; :func:`verify_theorem` checks this numerically.
Positions are 0-based and every quantity is in nats.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from maskdiff import kernels
from maskdiff.core import RngStream
from maskdiff.data import make_example, vocab_for
from maskdiff.errors import InvalidArgument, NumericError, ResourceLimit
from maskdiff.net import AttentionMode, ModelParams, forward
from maskdiff.synth import (ProcessSpec, Sample, TextExpansion, exact_conditional, exact_joint,
                            sample_chain_batch)

SKIP_FLOOR = 1e-15  # conditioning events lighter than this are dropped
CLAMP = 1e-12  # negative rounding noise tolerated before clamping to zero
MAX_EXACT_N = 10  # subset enumeration limit for eps
MAX_EXACT_PATTERNS = 2 ** 14  # mask-pattern enumeration limit for the gap
BOUND_SLACK = 1e-9


def _table(spec: ProcessSpec) -> np.ndarray:
    if isinstance(spec, TextExpansion):
        raise InvalidArgument("information oracles need a fixed-length chain process")
    return exact_joint(spec)


def _clamp(value: float, what: str) -> float:
    if value < -CLAMP:
        raise NumericError(f"{what} is negative beyond rounding: {value:.3e}")
    return max(0.0, value)


def _split(table: np.ndarray, left: tuple[int, ...], i: int, right: tuple[int, ...]) -> np.ndarray:
    """Marginal of the joint over ``left + (i,) + right`` reshaped to ``[a, x, c]``."""
    n, v = table.ndim, table.shape[0]
    keep = set(left) | {i} | set(right)
    drop = tuple(k for k in range(n) if k not in keep)
    sub = table.sum(axis=drop) if drop else table
    # remaining axes appear in increasing position order; left < i < right
    return np.ascontiguousarray(sub).reshape(v ** len(left), v, v ** len(right))


# --- forward dependence --------------------------------------------------------

@dataclass
class EpsReport:
    eps: float
    position: int
    subset: tuple[int, ...]
    table: dict[tuple[int, tuple[int, ...]], float]
    sampled: bool = False  # True: subsets were sampled, eps is only a lower bound
    skipped_mass: float = 0.0
    units: str = "nats"

    @property
    def certifying(self) -> bool:
        return not self.sampled


def eps_forward_dependence(spec: ProcessSpec, max_subsets: int | None = None,
                           rng: RngStream | None = None) -> EpsReport:
    """Maximise ``I(x_i; X_{>i} | X_S)`` over positions and past subsets.

    Exact when ``n <= 10``. Longer chains raise :class:`ResourceLimit` unless
    ``max_subsets`` is given, in which case up to that many subsets per
    position are drawn and the result is flagged as a sampled lower bound.
    """
    table = _table(spec)
    n = table.ndim
    sampled = n > MAX_EXACT_N
    if sampled and max_subsets is None:
        raise ResourceLimit(f"exact subset search needs n <= {MAX_EXACT_N}, got n={n}")
    rng = rng or RngStream(0, (0x5e75,))
    out: dict[tuple[int, tuple[int, ...]], float] = {}
    skipped = 0.0
    for i in range(n - 1):  # the last position has no future
        right = tuple(range(i + 1, n))
        if sampled:
            draws = rng.random((max_subsets, i)) < 0.5 if i else np.zeros((1, 0), bool)
            subsets = sorted({tuple(int(k) for k in np.flatnonzero(row)) for row in draws})
        else:
            subsets = [s for r in range(i + 1) for s in itertools.combinations(range(i), r)]
        for s in subsets:
            value, miss = kernels.cond_mi(_split(table, s, i, right), SKIP_FLOOR)
            out[(i, s)] = _clamp(value, f"I(x_{i}; future | {s})")
            skipped = max(skipped, miss)
    out[(n - 1, ())] = 0.0
    (pos, subset), eps = max(out.items(), key=lambda kv: (kv[1], -kv[0][0], -len(kv[0][1])))
    return EpsReport(eps, pos, subset, out, sampled, skipped)


# --- expected KL gap -----------------------------------------------------------

@functools.lru_cache(maxsize=256)
def _pattern_values(spec: ProcessSpec, i: int):
    """Per reveal pattern: (#revealed, expected KL, skipped mass), all patterns."""
    table = _table(spec)
    n = table.ndim
    others = [k for k in range(n) if k != i]
    rows = []
    for bits in itertools.product((False, True), repeat=len(others)):
        revealed = [k for k, b in zip(others, bits) if b]
        left = tuple(k for k in revealed if k < i)
        right = tuple(k for k in revealed if k > i)
        if right:
            value, miss = kernels.expected_kl(_split(table, left, i, right), SKIP_FLOOR)
        else:
            value, miss = 0.0, 0.0
        rows.append((len(revealed), value, miss))
    return tuple(rows)


def _check_tau(tau: float):
    if not 0.0 < tau < 1.0:
        raise InvalidArgument(f"tau must lie in (0, 1), got {tau}")


@dataclass
class GapEstimate:
    value: float
    stderr: float  # 0 for exact enumeration
    n_patterns: int
    method: str  # "exact" or "monte_carlo"
    skipped_mass: float = 0.0


def expected_kl_gap(spec: ProcessSpec, tau: float, i: int, n_samples: int = 4096,
                    rng: RngStream | None = None, method: str = "auto") -> GapEstimate:
    """E over reveal patterns and values of KL(P(x_i | both sides) || P(x_i | left)).

    Each position other than ``i`` is revealed independently with
    probability ``1 - tau``; ``x_i`` itself is always hidden.
    """
    _check_tau(tau)
    table = _table(spec)
    n = table.ndim
    if not 0 <= i < n:
        raise InvalidArgument(f"position {i} outside 0..{n - 1}")
    if method == "auto":
        method = "exact" if 2 ** (n - 1) <= MAX_EXACT_PATTERNS else "monte_carlo"
    if method == "exact":
        total, skipped = 0.0, 0.0
        rows = _pattern_values(spec, i)
        for n_rev, value, miss in rows:
            w = (1 - tau) ** n_rev * tau ** (n - 1 - n_rev)
            total += w * value
            skipped += w * miss
        return GapEstimate(_clamp(total, "expected KL gap"), 0.0, len(rows), "exact", skipped)
    if method != "monte_carlo":
        raise InvalidArgument(f"unknown method {method!r}")
    rng = rng or RngStream(0, (0x6a9,))
    reveal = rng.random((n_samples, n)) >= tau
    vals = np.empty(n_samples)
    skipped = 0.0
    for r in range(n_samples):
        left = tuple(k for k in range(i) if reveal[r, k])
        right = tuple(k for k in range(i + 1, n) if reveal[r, k])
        if right:
            vals[r], miss = kernels.expected_kl(_split(table, left, i, right), SKIP_FLOOR)
            skipped += miss / n_samples
        else:
            vals[r] = 0.0
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    return GapEstimate(_clamp(float(vals.mean()), "expected KL gap"), se, n_samples, "monte_carlo", skipped)


@dataclass
class KlGapReport:
    tau: float
    gaps: list[float]  # indexed by position
    stderr: list[float]
    n_patterns: int
    method: str
    skipped_mass: float = 0.0

    @property
    def reveal_prob(self) -> float:
        return 1.0 - self.tau


def kl_gap_report(spec: ProcessSpec, tau: float, **kw) -> KlGapReport:
    n = _table(spec).ndim
    ests = [expected_kl_gap(spec, tau, i, **kw) for i in range(n)]
    return KlGapReport(tau, [e.value for e in ests], [e.stderr for e in ests], ests[0].n_patterns,
                       ests[0].method, max(e.skipped_mass for e in ests))


# --- the bound ------------------------------------------------------------------

@dataclass
class TheoremReport:
    eps: EpsReport
    rows: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    @property
    def certifying(self) -> bool:
        return self.eps.certifying and all(r["method"] == "exact" for r in self.rows)

    @property
    def min_margin(self) -> float:
        return min(r["margin"] for r in self.rows)

    def csv_rows(self) -> list[dict]:
        return [{k: r[k] for k in ("position", "tau", "kl_gap", "eps", "margin", "method")}
                for r in self.rows]

    def summary(self) -> str:
        worst = min(self.rows, key=lambda r: r["margin"])
        verdict = "PASS" if self.passed else "FAIL"
        cert = "certifying" if self.certifying else "non-certifying (sampled)"
        return (f"{verdict}: {sum(r['passed'] for r in self.rows)}/{len(self.rows)} (position, tau) "
                f"cells satisfy gap <= eps + {BOUND_SLACK:g}; eps = {self.eps.eps:.6g} nats at "
                f"position {self.eps.position} given {list(self.eps.subset)}; tightest margin "
                f"{worst['margin']:.3g} at position {worst['position']}, tau {worst['tau']:g}; {cert}")


def verify_theorem(spec: ProcessSpec, taus, **kw) -> TheoremReport:
    """Check ``expected_kl_gap <= eps + 1e-9`` for every position and tau."""
    taus = list(taus)
    if not taus:
        raise InvalidArgument("need at least one tau")
    for tau in taus:
        _check_tau(tau)
    eps = eps_forward_dependence(spec, **{k: v for k, v in kw.items() if k in ("max_subsets",)})
    rep = TheoremReport(eps)
    n = _table(spec).ndim
    gap_kw = {k: v for k, v in kw.items() if k in ("n_samples", "rng", "method")}
    for tau in taus:
        for i in range(n):
            g = expected_kl_gap(spec, tau, i, **gap_kw)
            margin = eps.eps - g.value
            rep.rows.append({"position": i, "tau": float(tau), "kl_gap": g.value, "eps": eps.eps,
                             "margin": margin, "method": g.method, "stderr": g.stderr,
                             "passed": margin >= -BOUND_SLACK})
    return rep


# --- trained-model counterpart ---------------------------------------------------

def model_kl_gap(params: ModelParams, spec: ProcessSpec, tau: float, i: int, n_samples: int,
                 rng: RngStream) -> tuple[float, float]:
    """Monte Carlo mean and standard error of KL(model posterior || exact left posterior).

    Sequences come from the process, reveal patterns from the same masking
    model as :func:`expected_kl_gap`; the model sees the whole chain as its
    target span with unrevealed positions set to the mask token.
    """
    _check_tau(tau)
    table = _table(spec)
    n = table.ndim
    if not 0 <= i < n:
        raise InvalidArgument(f"position {i} outside 0..{n - 1}")
    vocab = vocab_for(spec)
    seqs = sample_chain_batch(spec, rng.child("seq"), n_samples)
    reveal = rng.child("mask").random((n_samples, n)) >= tau
    reveal[:, i] = False
    batch, lefts = [], []
    for r in range(n_samples):
        ex = make_example(spec, Sample(seqs[r]), vocab)
        toks = ex.layout.array.copy()
        g0 = ex.layout.target_span[0]
        toks[g0:g0 + n][~reveal[r]] = vocab.mask_id
        batch.append(toks)
        lefts.append({k: int(seqs[r, k]) for k in range(i) if reveal[r, k]})
    tokens = np.stack(batch)
    logits = forward(params, tokens, AttentionMode.BIDIRECTIONAL).logits
    row = g0 + i - 1 if params.config.label_shift else g0 + i
    s0, s1 = vocab.speech_range
    z = logits[:, row, s0:s1]
    z = z - z.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    kls = np.empty(n_samples)
    for r in range(n_samples):
        p = exact_conditional(table, lefts[r], i)
        q = np.exp(logq[r])
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        kls[r] = float(np.sum(q * (logq[r] - logp))) if np.all(p[q > 0] > 0) else math.inf
    se = float(kls.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    return float(kls.mean()), se
