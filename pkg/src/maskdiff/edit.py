"""Editing by selective masking: attention alignment, edit plans, regeneration.

An edit changes the text and regenerates only the target tokens aligned to
the changed text plus a context margin; everything else is frozen. The
alignment comes from one attention head, chosen by scoring every head
against known alignments on held-out sequences.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

import numpy as np

from maskdiff import kernels
from maskdiff.core import RngStream, SequenceLayout, Vocab, build_layout
from maskdiff.decode import DecodeConfig, DecodeTrace, constrained_diffuse_decode
from maskdiff.errors import InvalidArgument
from maskdiff.net import ModelParams, forward
from maskdiff.synth import GroundTruthAlignment

SUBSTITUTE_MARGIN = 5
INSERT_DELETE_MARGIN = 3
UNIFORM_TOL = 1e-9
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class AlignmentMap:
    """Target-relative half-open interval per text token, in order and covering the target."""

    spans: tuple[tuple[int, int], ...]
    fallback: bool = False  # True when attention was degenerate and proportional split was used

    def __post_init__(self):
        pos = 0
        for a, b in self.spans:
            if a != pos or b < a:
                raise InvalidArgument(f"alignment spans must be contiguous and ordered: {self.spans}")
            pos = b
        if not self.spans:
            raise InvalidArgument("alignment needs at least one text token")

    @property
    def boundaries(self) -> np.ndarray:
        return np.array([a for a, _ in self.spans[1:]], dtype=np.int64)

    @property
    def target_len(self) -> int:
        return self.spans[-1][1]

    @classmethod
    def from_boundaries(cls, boundaries, target_len: int, fallback: bool = False) -> "AlignmentMap":
        edges = [0, *[int(b) for b in boundaries], int(target_len)]
        return cls(tuple(zip(edges[:-1], edges[1:])), fallback)


@dataclass(frozen=True)
class HeadId:
    layer: int
    head: int
    score: float = float("nan")  # mean boundary MAE on the validation set


def proportional_alignment(n_text: int, target_len: int, fallback: bool = False) -> AlignmentMap:
    """Split the target evenly: boundary k at round(k * M / K)."""
    if n_text < 1 or target_len < n_text:
        raise InvalidArgument("need 1 <= n_text <= target_len")
    bounds = [int(np.floor(k * target_len / n_text + 0.5)) for k in range(1, n_text)]
    return AlignmentMap.from_boundaries(bounds, target_len, fallback)


def path_to_alignment(path, n_text: int) -> AlignmentMap:
    """Column index per target row (monotone) to per-column intervals."""
    path = np.asarray(path)
    bounds = [int(np.searchsorted(path, k, side="left")) for k in range(1, n_text)]
    return AlignmentMap.from_boundaries(bounds, len(path))


def alignment_from_attention(att: np.ndarray) -> AlignmentMap:
    """Best monotone path through a (target rows x text columns) attention block.

    Rows are renormalised over the text columns and scored in log space;
    a block with no variation falls back to the proportional split.
    """
    att = np.asarray(att, dtype=np.float64)
    m, k = att.shape
    if k > m:
        raise InvalidArgument("target shorter than text: no monotone alignment")
    mass = att.sum(axis=1, keepdims=True)
    norm = np.divide(att, mass, out=np.full_like(att, 1.0 / k), where=mass > 0)
    if np.all(np.ptp(norm, axis=1) <= UNIFORM_TOL):
        return proportional_alignment(k, m, fallback=True)
    path = kernels.monotone_path(np.log(norm + LOG_FLOOR))
    return path_to_alignment(path, k)


def _predictor_rows(params: ModelParams, layout: SequenceLayout) -> slice:
    """Query rows whose outputs predict the target tokens, in target order."""
    g0, g1 = layout.target_span
    # with label shift the state that predicts target token j sits one position earlier
    return slice(g0 - 1, g1 - 1) if params.config.label_shift else slice(g0, g1)


def _attention(params: ModelParams, layouts: list[SequenceLayout]) -> list[np.ndarray]:
    """(layer, head, query, key) attention per layout; equal lengths share a batch."""
    out: list[np.ndarray | None] = [None] * len(layouts)
    groups: dict[int, list[int]] = {}
    for r, lay in enumerate(layouts):
        groups.setdefault(len(lay), []).append(r)
    for idx in groups.values():
        toks = np.stack([layouts[r].array for r in idx])
        att = forward(params, toks, capture_attention=True).attention
        for j, r in enumerate(idx):
            out[r] = att[j]
    return out


def attention_alignment(params: ModelParams, layout: SequenceLayout, head: HeadId,
                        attention: np.ndarray | None = None) -> AlignmentMap:
    """Align text tokens to the realised target using one attention head."""
    if not 0 <= head.layer < params.config.n_layers or not 0 <= head.head < params.config.n_heads:
        raise InvalidArgument(f"head {head} outside the model")
    att = _attention(params, [layout])[0] if attention is None else attention
    a0, a1 = layout.text_span
    block = att[head.layer, head.head, _predictor_rows(params, layout), a0:a1]
    return alignment_from_attention(block)


def alignment_mae(predicted: AlignmentMap, truth: GroundTruthAlignment | AlignmentMap) -> float:
    """Mean absolute difference of the internal span boundaries, in target tokens."""
    if len(predicted.spans) != len(truth.spans):
        raise InvalidArgument("alignments cover different numbers of text tokens")
    p, t = predicted.boundaries, truth.boundaries
    if len(p) == 0:
        return 0.0
    return float(np.abs(p - t).mean())


def select_alignment_head(params: ModelParams, layouts: list[SequenceLayout],
                          truths: list[GroundTruthAlignment], min_count: int = 16) -> list[HeadId]:
    """Rank every (layer, head) by mean boundary MAE, best first (ties: lower layer, head)."""
    if len(layouts) != len(truths):
        raise InvalidArgument("layouts and truths differ in count")
    if len(layouts) < min_count:
        raise InvalidArgument(f"need at least {min_count} validation sequences")
    cfg = params.config
    atts = _attention(params, layouts)
    scores = np.zeros((cfg.n_layers, cfg.n_heads))
    for lay, truth, att in zip(layouts, truths, atts):
        for l in range(cfg.n_layers):
            for h in range(cfg.n_heads):
                pred = attention_alignment(params, lay, HeadId(l, h), attention=att)
                scores[l, h] += alignment_mae(pred, truth)
    scores /= len(layouts)
    heads = [HeadId(l, h, float(scores[l, h])) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    return sorted(heads, key=lambda hd: (hd.score, hd.layer, hd.head))


# --- edit plans ------------------------------------------------------------------

class EditOp(str, enum.Enum):
    INSERT = "insert"
    DELETE = "delete"
    SUBSTITUTE = "substitute"


@dataclass(frozen=True)
class EditRequest:
    """Replace text tokens ``[start, stop)`` by ``replacement`` (text symbols).

    Insert uses ``start == stop``; Delete an empty replacement. ``margin``
    defaults to 5 for Substitute and 3 for Insert/Delete. ``new_region_len``
    sets how many target tokens an Insert creates (default: the average
    target tokens per text token of the current sequence, times the count).
    """

    op: str
    start: int
    stop: int
    replacement: tuple[int, ...] = ()
    margin: int | None = None
    new_region_len: int | None = None

    def __post_init__(self):
        op = EditOp(self.op)
        object.__setattr__(self, "replacement", tuple(int(x) for x in self.replacement))
        if self.start < 0 or self.stop < self.start:
            raise InvalidArgument(f"bad text span [{self.start}, {self.stop})")
        if op is EditOp.INSERT and (self.stop != self.start or not self.replacement):
            raise InvalidArgument("insert needs start == stop and a non-empty replacement")
        if op is EditOp.DELETE and (self.stop == self.start or self.replacement):
            raise InvalidArgument("delete needs a non-empty span and no replacement")
        if op is EditOp.SUBSTITUTE and (self.stop == self.start or not self.replacement):
            raise InvalidArgument("substitute needs a non-empty span and replacement")
        if self.margin is not None and self.margin < 0:
            raise InvalidArgument("margin must be non-negative")
        if self.new_region_len is not None and self.new_region_len < 0:
            raise InvalidArgument("new_region_len must be non-negative")

    @property
    def effective_margin(self) -> int:
        if self.margin is not None:
            return self.margin
        return SUBSTITUTE_MARGIN if self.op == EditOp.SUBSTITUTE else INSERT_DELETE_MARGIN

    @classmethod
    def from_json(cls, text: str) -> "EditRequest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"edit request is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise InvalidArgument("edit request must be a JSON object")
        unknown = set(d) - {"op", "start", "stop", "replacement", "margin", "new_region_len"}
        if unknown:
            raise InvalidArgument(f"unknown edit request fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidArgument(f"edit request: {exc}") from None
        except ValueError as exc:
            raise InvalidArgument(f"edit request: {exc}") from None

    def to_json(self) -> str:
        d = asdict(self)
        d["replacement"] = list(self.replacement)
        return json.dumps(d)


@dataclass(frozen=True)
class EditPlan:
    request: EditRequest
    layout: SequenceLayout  # new text; target carries old tokens with the new region set to mask
    mask_set: tuple[int, ...]  # target-relative positions to regenerate
    region: tuple[int, int]  # new-target interval replacing the aligned old region
    old_target_len: int

    def to_json(self) -> str:
        return json.dumps({"request": json.loads(self.request.to_json()),
                           "tokens": list(self.layout.tokens),
                           "text_span": list(self.layout.text_span),
                           "prompt_span": list(self.layout.prompt_span),
                           "target_span": list(self.layout.target_span),
                           "mask_set": list(self.mask_set), "region": list(self.region),
                           "old_target_len": self.old_target_len})


def plan_edit(request: EditRequest, alignment: AlignmentMap, layout: SequenceLayout,
              vocab: Vocab) -> EditPlan:
    """Build the edited layout and the set of target positions to regenerate.

    With the old aligned region ``[s, e)`` replaced by ``m`` new positions
    (``m = e - s`` for Substitute, 0 for Delete, ``new_region_len`` for
    Insert), the new target is ``old[:s] + [MASK] * m + old[e:]`` and the
    mask set is ``[s - margin, s + m + margin)`` clipped to the target.
    """
    text = [int(x) for x in layout.text]
    k = len(text)
    if len(alignment.spans) != k or alignment.target_len != layout.target_len:
        raise InvalidArgument("alignment does not match the layout")
    if request.stop > k:
        raise InvalidArgument(f"edit span [{request.start}, {request.stop}) outside {k} text tokens")
    op = EditOp(request.op)
    old = [int(x) for x in layout.target]
    if op is EditOp.INSERT:
        s = e = alignment.spans[request.start][0] if request.start < k else layout.target_len
        if request.new_region_len is not None:
            m = request.new_region_len
        else:
            m = int(np.floor(len(request.replacement) * layout.target_len / k + 0.5))
    else:
        s, e = alignment.spans[request.start][0], alignment.spans[request.stop - 1][1]
        if op is EditOp.DELETE and e == s:
            raise InvalidArgument("deleted text is aligned to an empty target region")
        m = 0 if op is EditOp.DELETE else e - s
    t0 = vocab.text_range[0]
    new_text = text[:request.start] + [t0 + y for y in request.replacement] + text[request.stop:]
    new_target = old[:s] + [vocab.mask_id] * m + old[e:]
    if not new_target:
        raise InvalidArgument("edit would leave an empty target")
    margin = request.effective_margin
    lo, hi = max(0, s - margin), min(len(new_target), s + m + margin)
    if op is EditOp.SUBSTITUTE and new_text == text:
        # replacing text by itself is a no-op: nothing is regenerated
        return EditPlan(request, layout, (), (s, e), layout.target_len)
    new_layout = build_layout(new_text, layout.prompt, len(new_target), vocab).with_target(new_target)
    return EditPlan(request, new_layout, tuple(range(lo, hi)), (s, s + m), layout.target_len)


def apply_edit(params: ModelParams, plan: EditPlan, vocab: Vocab, config: DecodeConfig,
               rng: RngStream) -> tuple[np.ndarray, DecodeTrace]:
    """Regenerate ``plan.mask_set`` under the frozen context; returns the new target."""
    tokens, trace = constrained_diffuse_decode(params, plan.layout, plan.mask_set, vocab, config, rng)
    g0, g1 = plan.layout.target_span
    return tokens[g0:g1], trace
