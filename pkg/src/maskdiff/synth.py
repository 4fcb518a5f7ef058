"""Synthetic token processes with exactly enumerable distributions.

Three families:

* :class:`MarkovChain` -- first-order chain over ``V`` symbols.
* :class:`NoisyChain` -- hidden Markov chain observed through a symmetric
  noisy channel; ``emit_noise`` is the probability of emitting a symbol other
  than the hidden state (spread uniformly over the remaining ``V - 1``).
* :class:`TextExpansion` -- each text symbol ``y`` expands to its codebook
  entry ``g(y)``; with ``dur_jitter`` the last code of the entry is repeated
  with probability 1/2 (duration ``L`` or ``L + 1``).
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from maskdiff import kernels
from maskdiff.core import RngStream
from maskdiff.errors import InvalidArgument, ResourceLimit, ZeroSupport

ENUM_BUDGET = 10 ** 6
_TOL = 1e-12


def _check_prob(vec, what):
    vec = np.asarray(vec, dtype=np.float64)
    if np.any(vec < 0) or abs(vec.sum() - 1.0) > _TOL:
        raise InvalidArgument(f"{what} is not a probability vector: {vec}")


@dataclass(frozen=True)
class MarkovChain:
    init: tuple[float, ...]
    trans: tuple[tuple[float, ...], ...]
    n: int

    def __post_init__(self):
        _freeze_chain(self)
        _check_chain(self.init, self.trans, self.n)

    @property
    def V(self) -> int:
        return len(self.init)

    @property
    def hidden(self):
        return (np.asarray(self.init), np.asarray(self.trans), np.eye(self.V))


@dataclass(frozen=True)
class NoisyChain:
    init: tuple[float, ...]
    trans: tuple[tuple[float, ...], ...]
    emit_noise: float
    n: int

    def __post_init__(self):
        _freeze_chain(self)
        _check_chain(self.init, self.trans, self.n)
        if not 0.0 <= self.emit_noise < 1.0:
            raise InvalidArgument("emit_noise must lie in [0, 1)")
        if self.V < 2:
            raise InvalidArgument("NoisyChain needs at least two symbols")

    @property
    def V(self) -> int:
        return len(self.init)

    @property
    def emission(self) -> np.ndarray:
        v, eta = self.V, self.emit_noise
        return (1 - eta) * np.eye(v) + eta / (v - 1) * (1 - np.eye(v))

    @property
    def hidden(self):
        return (np.asarray(self.init), np.asarray(self.trans), self.emission)


@dataclass(frozen=True)
class TextExpansion:
    codebook: tuple[tuple[int, ...], ...]  # row y = speech symbols for text symbol y
    n_text: int
    V: int
    dur_jitter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "codebook", tuple(tuple(int(s) for s in r) for r in self.codebook))
        if not self.codebook or any(len(row) == 0 for row in self.codebook):
            raise InvalidArgument("codebook entries must be non-empty")
        if any(not 0 <= s < self.V for row in self.codebook for s in row):
            raise InvalidArgument("codebook symbol outside alphabet")
        if len({len(row) for row in self.codebook}) != 1:
            raise InvalidArgument("codebook entries must share a common length L")
        if self.dur_jitter not in (0, 1):
            raise InvalidArgument("dur_jitter must be 0 or 1")
        if self.n_text < 1:
            raise InvalidArgument("n_text must be >= 1")

    @property
    def L(self) -> int:
        return len(self.codebook[0])

    @property
    def n_text_symbols(self) -> int:
        return len(self.codebook)

    @property
    def max_target_len(self) -> int:
        return self.n_text * (self.L + self.dur_jitter)

    def expand(self, y: int, dur: int) -> list[int]:
        row = list(self.codebook[y])
        return row + [row[-1]] * (dur - len(row))


ProcessSpec = Union[MarkovChain, NoisyChain, TextExpansion]


def _freeze_chain(spec):
    object.__setattr__(spec, "init", tuple(float(p) for p in spec.init))
    object.__setattr__(spec, "trans", tuple(tuple(float(p) for p in r) for r in spec.trans))


def _check_chain(init, trans, n):
    if n < 1:
        raise InvalidArgument("sequence length must be >= 1")
    _check_prob(init, "init")
    if len(trans) != len(init) or any(len(r) != len(init) for r in trans):
        raise InvalidArgument("transition matrix shape does not match init")
    for r in trans:
        _check_prob(r, "transition row")


@dataclass(frozen=True)
class GroundTruthAlignment:
    spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pos = 0
        for a, b in self.spans:
            if a != pos or b <= a:
                raise InvalidArgument(f"alignment spans not contiguous: {self.spans}")
            pos = b

    @property
    def boundaries(self) -> np.ndarray:
        return np.array([a for a, _ in self.spans[1:]], dtype=np.int64)


@dataclass(frozen=True)
class Sample:
    symbols: np.ndarray
    text: np.ndarray | None = None
    alignment: GroundTruthAlignment | None = None


# --- constructors ----------------------------------------------------------

def iid(probs, n) -> MarkovChain:
    probs = tuple(float(p) for p in probs)
    return MarkovChain(probs, tuple(probs for _ in probs), n)


def iid_uniform(V: int, n: int) -> MarkovChain:
    return iid([1.0 / V] * V, n)


def copy_chain(V: int, n: int) -> MarkovChain:
    eye = np.eye(V)
    return MarkovChain(tuple([1.0 / V] * V), tuple(tuple(r) for r in eye), n)


def sticky_trans(V: int, stay: float) -> tuple[tuple[float, ...], ...]:
    off = (1.0 - stay) / (V - 1)
    return tuple(tuple(stay if i == j else off for j in range(V)) for i in range(V))


def random_codebook(n_symbols: int, V: int, L: int, rng: RngStream) -> tuple[tuple[int, ...], ...]:
    """Distinct random length-``L`` code words over ``V`` speech symbols."""
    if V ** L < n_symbols:
        raise InvalidArgument("alphabet too small for distinct code words")
    seen, rows = set(), []
    while len(rows) < n_symbols:
        row = tuple(int(s) for s in rng.integers(0, V, size=L))
        if row not in seen:
            seen.add(row)
            rows.append(row)
    return tuple(rows)


# --- sampling --------------------------------------------------------------

def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_chain_batch(spec: MarkovChain | NoisyChain, rng: RngStream, count: int) -> np.ndarray:
    """``count`` sequences as an int array (count, n).

    Hidden uniforms are drawn before emission uniforms, so a NoisyChain with
    zero noise reproduces the MarkovChain draw for the same stream.
    """
    init, trans, _ = spec.hidden
    u = rng.random((count, spec.n))
    ci, ct = np.cumsum(init), np.cumsum(trans, axis=1)
    h = np.empty((count, spec.n), dtype=np.int64)
    h[:, 0] = _inverse_cdf(np.broadcast_to(ci, (count, spec.V)), u[:, 0])
    for j in range(1, spec.n):
        h[:, j] = _inverse_cdf(ct[h[:, j - 1]], u[:, j])
    if isinstance(spec, MarkovChain):
        return h
    e = rng.random((count, spec.n))
    ce = np.cumsum(spec.emission, axis=1)
    return _inverse_cdf(ce[h.ravel()], e.ravel()).reshape(count, spec.n)


def sample_sequence(spec: ProcessSpec, rng: RngStream) -> Sample:
    if isinstance(spec, TextExpansion):
        text = rng.integers(0, spec.n_text_symbols, size=spec.n_text)
        durs = spec.L + (rng.integers(0, 2, size=spec.n_text) if spec.dur_jitter else 0)
        durs = np.broadcast_to(durs, (spec.n_text,))
        out, spans, pos = [], [], 0
        for y, d in zip(text, durs):
            out += spec.expand(int(y), int(d))
            spans.append((pos, pos + int(d)))
            pos += int(d)
        return Sample(np.asarray(out, dtype=np.int64), text.astype(np.int64),
                      GroundTruthAlignment(tuple(spans)))
    return Sample(sample_chain_batch(spec, rng, 1)[0])


# --- exact enumeration -----------------------------------------------------

def _budget(spec) -> int:
    if isinstance(spec, TextExpansion):
        return spec.n_text_symbols ** spec.n_text * (2 ** spec.n_text if spec.dur_jitter else 1)
    return spec.V ** spec.n


@functools.lru_cache(maxsize=64)
def _chain_joint(spec) -> np.ndarray:
    init, trans, emit = spec.hidden
    flat = kernels.chain_joint(init, trans, emit, spec.n)
    table = flat.reshape((spec.V,) * spec.n)
    table.setflags(write=False)
    return table


def exact_joint(spec: ProcessSpec):
    """Probability of every sequence.

    Chains: array of shape ``(V,) * n`` indexed by the sequence.
    TextExpansion: dict mapping target tuples to probability (text marginalised).
    """
    if _budget(spec) > ENUM_BUDGET:
        raise ResourceLimit(f"enumeration needs {_budget(spec)} > {ENUM_BUDGET} entries")
    if not isinstance(spec, TextExpansion):
        return _chain_joint(spec)
    table: dict[tuple[int, ...], float] = {}
    p_text = spec.n_text_symbols ** -spec.n_text
    dur_opts = (spec.L, spec.L + 1) if spec.dur_jitter else (spec.L,)
    p_dur = len(dur_opts) ** -spec.n_text
    for text in itertools.product(range(spec.n_text_symbols), repeat=spec.n_text):
        for durs in itertools.product(dur_opts, repeat=spec.n_text):
            seq = tuple(s for y, d in zip(text, durs) for s in spec.expand(y, d))
            table[seq] = table.get(seq, 0.0) + p_text * p_dur
    return table


def exact_conditional(spec: ProcessSpec | np.ndarray, revealed: Mapping[int, int], i: int) -> np.ndarray:
    """P(x_i | revealed) by summing the joint table over all completions.

    ``spec`` may also be a precomputed joint table. Positions are 0-based.
    """
    table = spec if isinstance(spec, np.ndarray) else exact_joint(spec)
    if isinstance(table, dict):
        raise InvalidArgument("exact_conditional needs a chain process")
    n = table.ndim
    if not 0 <= i < n:
        raise InvalidArgument(f"position {i} outside sequence of length {n}")
    if i in revealed:
        raise InvalidArgument(f"position {i} is already revealed")
    index = tuple(int(revealed[k]) if k in revealed else slice(None) for k in range(n))
    sub = table[index]
    free = [k for k in range(n) if k not in revealed]
    ax = free.index(i)
    vec = sub.sum(axis=tuple(a for a in range(sub.ndim) if a != ax))
    z = vec.sum()
    if z <= 0.0:
        raise ZeroSupport(f"revealed assignment {dict(revealed)} has zero probability")
    return vec / z


def log_prob(spec: ProcessSpec, symbols, text=None) -> float:
    """Exact ln P(symbols); for TextExpansion, ln P(symbols | text)."""
    x = [int(s) for s in symbols]
    if isinstance(spec, TextExpansion):
        if text is None:
            p = exact_joint(spec).get(tuple(x), 0.0)
            return math.log(p) if p > 0 else -math.inf
        return _expansion_log_prob(spec, x, [int(y) for y in text])
    if len(x) != spec.n:
        raise InvalidArgument("sequence length does not match spec")
    init, trans, emit = spec.hidden
    if isinstance(spec, MarkovChain):
        p = init[x[0]]
        total = math.log(p) if p > 0 else -math.inf
        for a, b in zip(x, x[1:]):
            p = trans[a, b]
            total += math.log(p) if p > 0 else -math.inf
        return total
    # scaled forward recursion
    alpha = init * emit[:, x[0]]
    total = 0.0
    for j in range(len(x)):
        if j:
            alpha = (alpha @ trans) * emit[:, x[j]]
        z = alpha.sum()
        if z <= 0:
            return -math.inf
        total += math.log(z)
        alpha = alpha / z
    return total


def _expansion_log_prob(spec: TextExpansion, x: list[int], text: list[int]) -> float:
    dur_opts = (spec.L, spec.L + 1) if spec.dur_jitter else (spec.L,)
    w = 1.0 / len(dur_opts)
    # reach[pos] = probability the processed prefix of text produced x[:pos]
    reach = {0: 1.0}
    for y in text:
        nxt: dict[int, float] = {}
        for pos, p in reach.items():
            for d in dur_opts:
                if x[pos:pos + d] == spec.expand(y, d):
                    nxt[pos + d] = nxt.get(pos + d, 0.0) + p * w
        reach = nxt
    p = reach.get(len(x), 0.0)
    return math.log(p) if p > 0 else -math.inf


# --- configuration ---------------------------------------------------------

def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.replace(",", " ").split())


def _matrix(s: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(row) for row in s.split(";") if row.strip())


def spec_from_config(section: Mapping[str, str]) -> ProcessSpec:
    """Build a spec from a ``[process]`` key-value section.

    Chains: ``kind``, ``n``, ``init`` (or ``V`` for uniform), ``trans`` rows
    separated by ``;`` (or ``stay`` for a sticky chain), ``eta`` for noisy.
    Text expansion: ``codebook`` rows separated by ``;``, ``n_text``, ``V``,
    ``jitter``.
    """
    try:
        kind = section["kind"].strip().lower()
        if kind in ("markov", "markov_chain", "noisy", "noisy_chain"):
            n = int(section["n"])
            if "init" in section:
                init = _floats(section["init"])
            else:
                v = int(section["V"])
                init = tuple([1.0 / v] * v)
            v = len(init)
            if "trans" in section:
                trans = _matrix(section["trans"])
            elif "stay" in section:
                trans = sticky_trans(v, float(section["stay"]))
            else:
                trans = tuple(init for _ in init)
            if kind.startswith("noisy"):
                return NoisyChain(init, trans, float(section.get("eta", 0.0)), n)
            return MarkovChain(init, trans, n)
        if kind in ("text_expansion", "expansion"):
            book = tuple(tuple(int(t) for t in row.split()) for row in section["codebook"].split(";")
                         if row.strip())
            return TextExpansion(book, int(section["n_text"]), int(section["V"]),
                                 int(section.get("jitter", 0)))
    except KeyError as exc:
        raise InvalidArgument(f"process config missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise InvalidArgument(f"bad process config value: {exc}") from None
    raise InvalidArgument(f"unknown process kind {section['kind']!r}")


def spec_to_config(spec: ProcessSpec) -> dict[str, str]:
    def row(r):
        return " ".join(repr(float(x)) for x in r)

    if isinstance(spec, TextExpansion):
        return {"kind": "text_expansion", "n_text": str(spec.n_text), "V": str(spec.V),
                "jitter": str(spec.dur_jitter),
                "codebook": "; ".join(" ".join(str(s) for s in r) for r in spec.codebook)}
    out = {"kind": "markov" if isinstance(spec, MarkovChain) else "noisy", "n": str(spec.n),
           "init": row(spec.init), "trans": "; ".join(row(r) for r in spec.trans)}
    if isinstance(spec, NoisyChain):
        out["eta"] = repr(spec.emit_noise)
    return out
