"""Speed/quality sweeps, unmasking-order statistics and their reports.

Quality is measured two ways, and every report header says which:

* ``token_accuracy``: fraction of generated target tokens equal to the
  reference sample (a true quality score only for deterministic processes);
* ``nll``: exact ``-ln P(target | conditioning)`` of the generated target
  under the process law (lower is better; meaningful for stochastic ones).
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import rankdata

from maskdiff.core import RngStream, SequenceLayout, Vocab, build_layout
from maskdiff.data import Example, sample_examples, vocab_for
from maskdiff.decode import (DecodeConfig, DecodeTrace, ar_decode, diffuse_decode,
                             diffuse_decode_batch)
from maskdiff.errors import InvalidArgument
from maskdiff.net import ModelParams
from maskdiff.reporting import Axes, emit_csv, emit_svg_plot
from maskdiff.synth import ProcessSpec, TextExpansion, log_prob

SWEEP_COLUMNS = ["decoder", "steps", "target_len", "n_eval", "token_accuracy", "nll",
                 "forward_pass_count", "wall_time"]
SWEEP_NOTE = ("token_accuracy = match rate vs reference sample (exact for deterministic processes); "
              "nll = exact -ln P(target | conditioning) in nats, lower is better; "
              "wall_time = median seconds per single-sequence decode")
TIMING_REPEATS = 5


@dataclass
class SweepRow:
    decoder: str  # diffusion, ar_cached or ar_uncached
    steps: int
    target_len: int
    n_eval: int
    token_accuracy: float
    nll: float
    forward_pass_count: int
    wall_time: float

    def as_dict(self) -> dict:
        return asdict(self)


# --- quality -------------------------------------------------------------------

def nll_under_process(spec: ProcessSpec, tokens, text=None, prefix_len: int = 0) -> float:
    """Exact ``-ln P`` of a symbol sequence; ``inf`` for impossible sequences.

    ``text`` conditions a TextExpansion target on its text. ``prefix_len``
    conditions a chain on its first symbols, giving the NLL of the rest.
    """
    x = [int(s) for s in tokens]
    if isinstance(spec, TextExpansion) or not prefix_len:
        return -log_prob(spec, x, text)
    if not 0 < prefix_len < len(x):
        raise InvalidArgument("prefix_len must leave at least one symbol")
    joint = log_prob(spec, x, None)
    prefix = log_prob(replace(spec, n=prefix_len), x[:prefix_len], None)
    return -(joint - prefix)


def is_deterministic(spec: ProcessSpec) -> bool:
    """True when the target is a function of its conditioning (text or prompt)."""
    if isinstance(spec, TextExpansion):
        return spec.dur_jitter == 0
    init, trans, emit = spec.hidden
    return bool(np.all(np.isin(trans, (0.0, 1.0))) and np.all(np.isin(emit, (0.0, 1.0))))


def primary_metric(spec: ProcessSpec) -> str:
    return "token_accuracy" if is_deterministic(spec) else "nll"


def _quality(spec: ProcessSpec, ex: Example, generated: np.ndarray, vocab: Vocab) -> tuple[float, float]:
    g0, g1 = ex.layout.target_span
    gen = vocab.symbols(generated[g0:g1])
    ref = vocab.symbols(ex.layout.target)
    acc = float(np.mean(gen == ref))
    if isinstance(spec, TextExpansion):
        return acc, nll_under_process(spec, gen, ex.sample.text)
    prompt = vocab.symbols(ex.layout.prompt)
    return acc, nll_under_process(spec, np.concatenate([prompt, gen]), prefix_len=len(prompt))


def _mean_quality(spec, examples, outputs, vocab):
    q = [_quality(spec, ex, out, vocab) for ex, out in zip(examples, outputs)]
    return float(np.mean([a for a, _ in q])), float(np.mean([b for _, b in q]))


def _diffuse_all(params, examples, vocab, config, rng):
    """Batched decode of equal-geometry groups; outputs in input order."""
    out: list = [None] * len(examples)
    groups: dict[tuple, list[int]] = {}
    for r, ex in enumerate(examples):
        groups.setdefault((len(ex.layout), ex.layout.target_span), []).append(r)
    for key in sorted(groups):
        idx = groups[key]
        layouts = [examples[r].layout.with_target([vocab.mask_id] * examples[r].layout.target_len)
                   for r in idx]
        toks, _ = diffuse_decode_batch(params, layouts, vocab, config, rng.child(("group",) + key))
        for j, r in enumerate(idx):
            out[r] = toks[j]
    return out


# --- timing --------------------------------------------------------------------

def median_time(fn, repeats: int = TIMING_REPEATS) -> float:
    """Median wall time of ``fn()`` after one untimed warm-up call."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def timing_layout(vocab: Vocab, target_len: int, text_len: int = 1, prompt_len: int = 0) -> SequenceLayout:
    """A layout with the given geometry; content does not affect cost."""
    t0, s0 = vocab.text_range[0], vocab.speech_range[0]
    return build_layout([t0] * text_len, [s0] * prompt_len, target_len, vocab)


def timing_rows(params: ModelParams, ar_params: ModelParams | None, vocab: Vocab, target_lens,
                steps: int, pad_to: int | None = None, repeats: int = TIMING_REPEATS,
                config: DecodeConfig | None = None, seed: int = 0) -> list[SweepRow]:
    """Wall time per decoder and target length (quality columns are NaN).

    Diffusion passes run on a buffer padded to ``pad_to`` (default: the
    longest layout), the same padding policy for every length.
    """
    config = replace(config or DecodeConfig(), steps=steps)
    layouts = {n: timing_layout(vocab, n) for n in target_lens}
    pad_to = pad_to or max(len(l) for l in layouts.values())
    rows = []
    for n, lay in layouts.items():
        wall = median_time(lambda: diffuse_decode(params, lay, vocab, config, RngStream(seed), pad_to),
                           repeats)
        rows.append(SweepRow("diffusion", steps, n, 1, math.nan, math.nan, steps, wall))
        if ar_params is None:
            continue
        for cached in (True, False):
            wall = median_time(lambda: ar_decode(ar_params, lay, vocab, cached, config.temperature,
                                                 config.top_p, RngStream(seed)), repeats)
            rows.append(SweepRow("ar_cached" if cached else "ar_uncached", n, n, 1, math.nan,
                                 math.nan, n, wall))
    return rows


def speed_quality_sweep(params: ModelParams, spec: ProcessSpec, steps_list, n_eval: int,
                        rng: RngStream, ar_params: ModelParams | None = None, prompt_len: int = 0,
                        config: DecodeConfig | None = None, repeats: int = TIMING_REPEATS) -> list[SweepRow]:
    """Decode ``n_eval`` held-out sequences at every T (and with the AR
    baselines once), scoring accuracy and exact NLL; time one sequence."""
    steps_list = [int(t) for t in steps_list]
    if not steps_list:
        raise InvalidArgument("empty sweep")
    if n_eval < 1:
        raise InvalidArgument("n_eval must be positive")
    vocab = vocab_for(spec)
    config = config or DecodeConfig()
    examples = sample_examples(spec, rng.child("sweep-data"), n_eval, vocab, prompt_len)
    probe = examples[0].layout.with_target([vocab.mask_id] * examples[0].layout.target_len)
    n = probe.target_len
    rows = []
    for t in steps_list:
        cfg = replace(config, steps=t)
        outs = _diffuse_all(params, examples, vocab, cfg, rng.child(("diffusion", t)))
        acc, nll = _mean_quality(spec, examples, outs, vocab)
        wall = median_time(lambda: diffuse_decode(params, probe, vocab, cfg, rng.child("timing")), repeats)
        rows.append(SweepRow("diffusion", t, n, n_eval, acc, nll, t, wall))
    if ar_params is not None:
        for cached in (True, False):
            name = "ar_cached" if cached else "ar_uncached"
            outs = [ar_decode(ar_params, ex.layout, vocab, cached, config.temperature, config.top_p,
                              rng.child((name, r)))[0] for r, ex in enumerate(examples)]
            acc, nll = _mean_quality(spec, examples, outs, vocab)
            wall = median_time(lambda: ar_decode(ar_params, probe, vocab, cached, config.temperature,
                                                 config.top_p, rng.child("timing")), repeats)
            rows.append(SweepRow(name, n, n, n_eval, acc, nll, n, wall))
    return rows


def smoothed(values, width: int = 2) -> list[float]:
    """Moving average over ``width`` consecutive points."""
    v = list(values)
    if len(v) < width:
        return v
    return [sum(v[k:k + width]) / width for k in range(len(v) - width + 1)]


def is_non_decreasing(values, tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))


# --- unmasking order ---------------------------------------------------------

@dataclass
class WavefrontStats:
    rhos: list[float]
    mean: float
    std: float
    skipped: int  # traces where the rank correlation is undefined


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; NaN if either side is constant."""
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return math.nan
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(np.clip((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


def wavefront_stats(traces: list[DecodeTrace]) -> WavefrontStats:
    """Per-trace Spearman correlation between target position and unmask step."""
    if not traces:
        raise InvalidArgument("need at least one trace")
    rhos, skipped = [], 0
    for tr in traces:
        steps = np.asarray(tr.unmask_step)
        rho = spearman(np.arange(len(steps)), steps) if len(steps) > 1 else math.nan
        if math.isnan(rho):
            skipped += 1
        else:
            rhos.append(rho)
    if not rhos:
        return WavefrontStats([], math.nan, math.nan, skipped)
    std = float(np.std(rhos, ddof=1)) if len(rhos) > 1 else 0.0
    return WavefrontStats(rhos, float(np.mean(rhos)), std, skipped)


# --- reports -----------------------------------------------------------------

def emit_sweep_csv(rows: list[SweepRow], path):
    return emit_csv([r.as_dict() for r in rows], path, kind="speed_quality", note=SWEEP_NOTE,
                    columns=SWEEP_COLUMNS)


def emit_sweep_svg(rows: list[SweepRow], path, metric: str = "nll"):
    """Quality metric against steps for diffusion, AR baselines as flat reference lines."""
    if not rows:
        raise InvalidArgument("no rows to plot")
    diff = sorted((r for r in rows if r.decoder == "diffusion"), key=lambda r: r.steps)
    series = {"diffusion": [(r.steps, getattr(r, metric)) for r in diff]}
    if diff:
        xs = (diff[0].steps, diff[-1].steps)
        for r in rows:
            if r.decoder != "diffusion":
                series[r.decoder] = [(x, getattr(r, metric)) for x in xs]
    label = {"nll": "NLL (nats, lower is better)", "token_accuracy": "token accuracy",
             "wall_time": "wall time (s)"}[metric]
    return emit_svg_plot(series, Axes("denoising steps T", label, f"{metric} vs steps", log_x=True), path)


def emit_wavefront_csv(stats: WavefrontStats, path):
    rows = [{"trace": k, "spearman_rho": r} for k, r in enumerate(stats.rhos)]
    note = f"Spearman rank correlation of position vs unmask step; mean={stats.mean!r}; skipped={stats.skipped}"
    return emit_csv(rows, path, kind="wavefront", note=note)


def unmask_order_rows(traces: list[DecodeTrace]) -> list[dict]:
    return [{"trace": k, "position": j, "unmask_step": int(s)}
            for k, tr in enumerate(traces) for j, s in enumerate(tr.unmask_step)]
