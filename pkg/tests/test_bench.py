import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy import stats

from maskdiff.bench import (SWEEP_COLUMNS, SweepRow, emit_sweep_csv, emit_sweep_svg, emit_wavefront_csv,
                            is_deterministic, is_non_decreasing, nll_under_process, primary_metric,
                            smoothed, spearman, speed_quality_sweep, timing_rows, unmask_order_rows,
                            wavefront_stats)
from maskdiff.core import RngStream
from maskdiff.data import vocab_for
from maskdiff.decode import DecodeConfig, DecodeTrace
from maskdiff.errors import InvalidArgument
from maskdiff.net import ModelConfig, init_params
from maskdiff.reporting import parse_csv
from maskdiff.synth import MarkovChain, copy_chain, log_prob, sticky_trans


def trace(steps):
    steps = np.asarray(steps)
    return DecodeTrace(steps, [int((steps == s).sum()) for s in range(steps.max() + 1)], 0, 0.0)


def test_spearman_golden_with_ties(goldens):
    assert spearman([0, 1, 2, 3], [0, 0, 1, 1]) == pytest.approx(goldens["spearman_0011"], abs=1e-15)


def test_spearman_agrees_with_pearson_of_ranks():
    g = np.random.default_rng(0)
    for _ in range(20):
        x, y = g.integers(0, 5, 12), g.integers(0, 5, 12)
        ref = np.corrcoef(stats.rankdata(x), stats.rankdata(y))[0, 1]
        assert spearman(x, y) == pytest.approx(ref, abs=1e-12)


def test_spearman_constant_is_nan():
    assert math.isnan(spearman([0, 1, 2], [4, 4, 4]))


def test_wavefront_stats():
    st = wavefront_stats([trace([0, 1, 2, 3]), trace([3, 2, 1, 0]), trace([1, 1, 1, 1]), trace([0, 0, 1, 1])])
    assert st.skipped == 1 and len(st.rhos) == 3
    assert st.rhos[:2] == [1.0, -1.0]
    assert st.mean == pytest.approx(np.mean(st.rhos)) and st.std == pytest.approx(np.std(st.rhos, ddof=1))
    assert math.isnan(wavefront_stats([trace([2, 2])]).mean)
    with pytest.raises(InvalidArgument):
        wavefront_stats([])


def test_smoothing_and_monotonicity():
    assert smoothed([1, 3, 2, 6], 2) == [2.0, 2.5, 4.0]
    assert smoothed([5], 2) == [5]
    assert is_non_decreasing([1, 1, 2]) and not is_non_decreasing([1, 0.9, 2])
    assert is_non_decreasing([1, 0.95, 2], tol=0.1)


def test_nll_matches_log_prob(sticky3, expansion):
    x = [0, 0, 1, 1, 1]
    assert nll_under_process(sticky3, x) == pytest.approx(-log_prob(sticky3, x))
    rest = nll_under_process(sticky3, x, prefix_len=2)
    assert rest == pytest.approx(-math.log(0.1 * 0.8 * 0.8))
    assert nll_under_process(expansion, [0, 1, 2, 3, 1, 1], [0, 1, 2]) == pytest.approx(0.0)
    assert nll_under_process(expansion, [0, 1, 2, 3, 1, 0], [0, 1, 2]) == math.inf
    with pytest.raises(InvalidArgument):
        nll_under_process(sticky3, x, prefix_len=5)


def test_primary_metric(sticky3, expansion, jitter_expansion):
    assert primary_metric(expansion) == "token_accuracy" and primary_metric(jitter_expansion) == "nll"
    assert primary_metric(sticky3) == "nll"
    assert is_deterministic(copy_chain(3, 4))


@pytest.fixture
def chain_model():
    spec = MarkovChain((0.25,) * 4, sticky_trans(4, 0.7), 6)
    v = vocab_for(spec)
    cfg = ModelConfig(vocab_size=v.size, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=16)
    return spec, v, init_params(cfg, RngStream(1), std=0.2)


def test_sweep_rows(chain_model):
    spec, v, params = chain_model
    rows = speed_quality_sweep(params, spec, [1, 3], 4, RngStream(0), ar_params=params, prompt_len=2,
                               repeats=1)
    assert [r.decoder for r in rows] == ["diffusion", "diffusion", "ar_cached", "ar_uncached"]
    assert [r.forward_pass_count for r in rows] == [1, 3, 4, 4]
    for r in rows:
        assert r.target_len == 4 and r.n_eval == 4 and 0 <= r.token_accuracy <= 1
        assert r.nll >= 0 and r.wall_time > 0
    with pytest.raises(InvalidArgument):
        speed_quality_sweep(params, spec, [], 4, RngStream(0))


def test_timing_rows(chain_model):
    _, v, params = chain_model
    rows = timing_rows(params, params, v, [3, 5], steps=2, repeats=1)
    assert [(r.decoder, r.target_len, r.forward_pass_count) for r in rows] == [
        ("diffusion", 3, 2), ("ar_cached", 3, 3), ("ar_uncached", 3, 3),
        ("diffusion", 5, 2), ("ar_cached", 5, 5), ("ar_uncached", 5, 5)]
    assert all(math.isnan(r.nll) for r in rows)


def test_sweep_reports(tmp_path):
    rows = [SweepRow("diffusion", t, 8, 4, 0.5, 10.0 / t, t, 0.01 * t) for t in (1, 2, 4)]
    rows.append(SweepRow("ar_cached", 8, 8, 4, 0.9, 1.5, 8, 0.05))
    back, info = parse_csv(emit_sweep_csv(rows, tmp_path / "s.csv"))
    assert info["kind"] == "speed_quality" and "nll" in info["note"]
    assert list(back[0]) == SWEEP_COLUMNS and back == [r.as_dict() for r in rows]
    root = ET.parse(emit_sweep_svg(rows, tmp_path / "s.svg")).getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2
    with pytest.raises(InvalidArgument):
        emit_sweep_svg([], tmp_path / "e.svg")


def test_wavefront_reports(tmp_path):
    traces = [trace([0, 1, 1]), trace([1, 0, 0])]
    back, info = parse_csv(emit_wavefront_csv(wavefront_stats(traces), tmp_path / "w.csv"))
    assert info["kind"] == "wavefront" and [r["trace"] for r in back] == [0, 1]
    assert len(unmask_order_rows(traces)) == 6
