"""Shared domain types: vocabulary, sequence layouts, masking, schedules, RNG
streams and the MDTC1 container format."""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from maskdiff.errors import InvalidArgument

Span = tuple[int, int]


@dataclass(frozen=True)
class Vocab:
    size: int
    pad_id: int
    sos_id: int
    sep_id: int
    eos_id: int
    mask_id: int
    text_range: Span
    speech_range: Span

    def __post_init__(self):
        specials = self.specials
        if len(set(specials)) != len(specials):
            raise InvalidArgument("special ids must be pairwise distinct")
        (t0, t1), (s0, s1) = self.text_range, self.speech_range
        if not (0 <= t0 < t1 <= self.size and 0 <= s0 < s1 <= self.size):
            raise InvalidArgument("token ranges must be non-empty and inside the vocabulary")
        if t0 < s1 and s0 < t1:
            raise InvalidArgument("text_range and speech_range overlap")
        for sid in specials:
            if not 0 <= sid < self.size:
                raise InvalidArgument(f"special id {sid} outside vocabulary")
            if t0 <= sid < t1 or s0 <= sid < s1:
                raise InvalidArgument(f"special id {sid} inside an ordinary range")

    @classmethod
    def build(cls, n_text: int, n_speech: int) -> "Vocab":
        """Five specials at ids 0-4, then text ids, then speech ids."""
        t0 = 5
        s0 = t0 + n_text
        return cls(size=s0 + n_speech, pad_id=0, sos_id=1, sep_id=2, eos_id=3, mask_id=4,
                   text_range=(t0, s0), speech_range=(s0, s0 + n_speech))

    @property
    def specials(self) -> tuple[int, ...]:
        return (self.pad_id, self.sos_id, self.sep_id, self.eos_id, self.mask_id)

    @property
    def n_speech(self) -> int:
        return self.speech_range[1] - self.speech_range[0]

    @property
    def n_text(self) -> int:
        return self.text_range[1] - self.text_range[0]

    def speech(self, symbols) -> np.ndarray:
        """Map process symbols 0..V-1 to speech token ids."""
        return np.asarray(symbols, dtype=np.int64) + self.speech_range[0]

    def symbols(self, ids) -> np.ndarray:
        return np.asarray(ids, dtype=np.int64) - self.speech_range[0]

    def text(self, symbols) -> np.ndarray:
        return np.asarray(symbols, dtype=np.int64) + self.text_range[0]

    def to_dict(self) -> dict:
        return {"n_text": self.n_text, "n_speech": self.n_speech}


@dataclass(frozen=True)
class SequenceLayout:
    """[SOS, text, SEP, prompt, target, EOS]; only ``target_span`` is maskable."""

    tokens: tuple[int, ...]
    text_span: Span
    prompt_span: Span
    target_span: Span

    def __post_init__(self):
        (a0, a1), (p0, p1), (g0, g1) = self.text_span, self.prompt_span, self.target_span
        if not (1 <= a0 <= a1 < p0 <= p1 <= g0 < g1 < len(self.tokens)):
            raise InvalidArgument(
                f"spans out of order: text={self.text_span} prompt={self.prompt_span} "
                f"target={self.target_span} len={len(self.tokens)}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)

    @property
    def target_len(self) -> int:
        return self.target_span[1] - self.target_span[0]

    @property
    def target(self) -> np.ndarray:
        return self.array[self.target_span[0]:self.target_span[1]]

    @property
    def text(self) -> np.ndarray:
        return self.array[self.text_span[0]:self.text_span[1]]

    @property
    def prompt(self) -> np.ndarray:
        return self.array[self.prompt_span[0]:self.prompt_span[1]]

    def with_target(self, target) -> "SequenceLayout":
        target = [int(x) for x in target]
        if len(target) != self.target_len:
            raise InvalidArgument("target length mismatch")
        g0, g1 = self.target_span
        toks = self.tokens[:g0] + tuple(target) + self.tokens[g1:]
        return SequenceLayout(toks, self.text_span, self.prompt_span, self.target_span)


@dataclass(frozen=True)
class MaskState:
    masked: np.ndarray  # bool, one entry per target position
    step: int = 0

    @property
    def count(self) -> int:
        return int(self.masked.sum())


@dataclass(frozen=True)
class Schedule:
    levels: tuple[float, ...]

    @property
    def steps(self) -> int:
        return len(self.levels) - 1


class RngStream:
    """Counter-based (Philox) random stream with labelled child streams.

    Children derived with the same label from the same parent are identical,
    independent of how many draws the parent has already made.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label) -> "RngStream":
        tag = zlib.crc32(str(label).encode("utf-8"))
        return RngStream(self.seed, self.key + (tag,))

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n, size=None, p=None):
        return self.gen.choice(n, size=size, p=p)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


def linear_schedule(T: int, t_floor: float = 0.0) -> Schedule:
    if int(T) != T or T < 1:
        raise InvalidArgument(f"T must be a positive integer, got {T!r}")
    if not 0.0 <= t_floor < 1.0:
        raise InvalidArgument(f"t_floor must lie in [0, 1), got {t_floor}")
    return Schedule(tuple(float(x) for x in np.linspace(1.0, t_floor, int(T) + 1)))


def build_layout(text: Sequence[int], prompt: Sequence[int], target_len: int, vocab: Vocab,
                 target: Sequence[int] | None = None) -> SequenceLayout:
    """Assemble a layout; the target is all ``mask_id`` unless ``target`` is given."""
    text = [int(x) for x in text]
    prompt = [int(x) for x in prompt]
    if not text:
        raise InvalidArgument("text must be non-empty")
    if target_len < 1:
        raise InvalidArgument("target_len must be >= 1")
    t0, t1 = vocab.text_range
    s0, s1 = vocab.speech_range
    if any(not t0 <= x < t1 for x in text):
        raise InvalidArgument("text id outside text_range")
    if any(not s0 <= x < s1 for x in prompt):
        raise InvalidArgument("prompt id outside speech_range")
    if target is None:
        body = [vocab.mask_id] * target_len
    else:
        body = [int(x) for x in target]
        if len(body) != target_len:
            raise InvalidArgument("target length mismatch")
        if any(not s0 <= x < s1 for x in body):
            raise InvalidArgument("target id outside speech_range")
    toks = [vocab.sos_id, *text, vocab.sep_id, *prompt, *body, vocab.eos_id]
    a0 = 1
    p0 = a0 + len(text) + 1
    g0 = p0 + len(prompt)
    return SequenceLayout(tuple(toks), (a0, a0 + len(text)), (p0, g0), (g0, g0 + target_len))


def apply_random_mask(layout: SequenceLayout, t: float, rng: RngStream,
                      mask_id: int) -> tuple[np.ndarray, MaskState]:
    """Mask each target token independently with probability ``t``."""
    if not 0.0 < t <= 1.0:
        raise InvalidArgument(f"masking rate must be in (0, 1], got {t}")
    toks = layout.array.copy()
    g0, g1 = layout.target_span
    masked = rng.random(g1 - g0) < t
    toks[g0:g1][masked] = mask_id
    return toks, MaskState(masked)


# --- MDTC1 container -------------------------------------------------------

MAGIC = b"MDTC1"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def write_container(path, tensors: Mapping[str, np.ndarray], config: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "f8" if arr.dtype.kind == "f" else "i8"
        if arr.dtype.kind not in "fiub":
            raise InvalidArgument(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(data.tobytes())
    meta = json.dumps({"version": FORMAT_VERSION, "config": config or {}, "tensors": entries},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for b in blobs:
            fh.write(b)
    return path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise InvalidArgument(f"{path}: not an MDTC1 file")
    (n,) = struct.unpack_from("<Q", raw, 5)
    meta = json.loads(raw[13:13 + n].decode("utf-8"))
    if meta.get("version") != FORMAT_VERSION:
        raise InvalidArgument(f"{path}: unsupported container version {meta.get('version')}")
    off = 13 + n
    out = {}
    for e in meta["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = math.prod(e["shape"])
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += count * dt.itemsize
    return out, meta["config"]
