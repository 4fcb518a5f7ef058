import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdiff import decode, kernels
from maskdiff.core import RngStream, Vocab, build_layout
from maskdiff.decode import (ConfidenceKind, DecodeConfig, DecodeTrace, ar_decode, confidence,
                             constrained_diffuse_decode, diffuse_decode, diffuse_decode_batch,
                             schedule_counts, softmax, top_p_sample, unmask_count)
from maskdiff.errors import InvalidArgument
from maskdiff.net import ModelConfig, init_params

VOCAB = Vocab.build(2, 6)


def model(mode="bidirectional", seed=0, max_len=48):
    cfg = ModelConfig(vocab_size=VOCAB.size, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                      max_len=max_len, attention_mode=mode)
    return init_params(cfg, RngStream(seed), std=0.5)


def masked_layout(n, prompt=()):
    return build_layout([5, 6], list(prompt), n, VOCAB)


class TestConfidence:
    def test_examples(self):
        assert confidence([0.7, 0.2, 0.1]) == pytest.approx(0.5)
        assert confidence([0.25] * 4) == 0.0
        assert confidence([0.0, 1.0, 0.0], ConfidenceKind.MAX_PROB) == 1.0
        assert confidence([0.5, 0.5], "neg_entropy") == pytest.approx(-math.log(2))
        assert confidence([1.0, 0.0], "neg_entropy") == 0.0

    def test_margin_needs_two(self):
        with pytest.raises(InvalidArgument):
            confidence([1.0])

    def test_rows(self):
        out = confidence(np.array([[0.7, 0.2, 0.1], [0.4, 0.4, 0.2]]))
        np.testing.assert_allclose(out, [0.5, 0.0])


class TestTopP:
    def test_nucleus_cutoff(self):
        logits = np.log([0.6, 0.3, 0.1])
        assert {top_p_sample(logits, 1.0, 0.586, RngStream(k)) for k in range(200)} == {0}

    def test_cold_limit_is_argmax(self):
        logits = np.array([0.1, 2.0, 1.9, -3.0])
        assert {top_p_sample(logits, 1e-4, 1.0, RngStream(k)) for k in range(100)} == {1}

    def test_full_distribution_frequencies(self):
        logits = np.array([0.3, -0.2, 1.1, 0.0, -1.5])
        tau = 0.986
        p = softmax(logits / tau)
        n = 100_000
        u = RngStream(5).random(n)
        draws = kernels.top_p_rows(np.broadcast_to(p, (n, 5)).copy(), 1.0, u)
        freq = np.bincount(draws, minlength=5) / n
        assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n))
        # the single-draw helper consumes one uniform per call and agrees with the batch kernel
        r = RngStream(5)
        assert [top_p_sample(logits, tau, 1.0, r) for _ in range(50)] == draws[:50].tolist()


class TestSchedule:
    def test_examples(self):
        assert schedule_counts(8, 4) == [2, 2, 2, 2]
        assert schedule_counts(5, 1) == [5]
        assert schedule_counts(6, 4) == [1, 1, 2, 2]
        assert schedule_counts(2, 5) == [1, 1, 0, 0, 0]

    def test_unmask_count_edges(self):
        assert unmask_count(0, 1.0, 0.5, False) == 0
        assert unmask_count(3, 1.0, 0.99, False) == 1  # floor would give zero progress
        assert unmask_count(3, 0.5, 0.25, True) == 3

    @settings(max_examples=300, deadline=None)
    @given(n=st.integers(1, 300), T=st.integers(1, 64), floor=st.sampled_from([0.0, 0.1]))
    def test_counts_cover_target(self, n, T, floor):
        counts = schedule_counts(n, T, floor)
        assert len(counts) == T and sum(counts) == n
        remaining = n
        for c in counts:
            assert (c >= 1) if remaining else (c == 0)
            remaining -= c


class CountingForward:
    """Wraps the decoder's forward to count passes and record the inputs."""

    def __init__(self, monkeypatch):
        self.inputs = []
        real = decode.forward

        def wrapped(params, tokens, *a, **kw):
            self.inputs.append(np.array(tokens, copy=True))
            return real(params, tokens, *a, **kw)

        monkeypatch.setattr(decode, "forward", wrapped)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 30), T=st.integers(1, 20), seed=st.integers(0, 2 ** 32 - 1))
def test_decode_invariants(n, T, seed):
    p = model(seed=seed % 7)
    lay = masked_layout(n)
    with pytest.MonkeyPatch.context() as mp:
        fw = CountingForward(mp)
        toks, trace = diffuse_decode(p, lay, VOCAB, DecodeConfig(steps=T), RngStream(seed))
    check_trace(lay, toks, trace, fw.inputs, T)
    again, trace2 = diffuse_decode(p, lay, VOCAB, DecodeConfig(steps=T), RngStream(seed))
    assert np.array_equal(toks, again) and np.array_equal(trace.unmask_step, trace2.unmask_step)


def check_trace(lay, toks, trace, inputs, T):
    g0, g1 = lay.target_span
    n = g1 - g0
    assert len(inputs) == T and trace.forward_pass_count == T
    assert trace.step_counts == schedule_counts(n, T)
    assert np.bincount(trace.unmask_step, minlength=T).tolist() == trace.step_counts
    s0, s1 = VOCAB.speech_range
    assert np.all((toks[g0:g1] >= s0) & (toks[g0:g1] < s1))
    assert np.array_equal(toks[:g0], lay.array[:g0]) and np.array_equal(toks[g1:], lay.array[g1:])
    # monotone: a revealed token never changes and the mask set only shrinks
    views = [x.reshape(-1)[g0:g1] for x in inputs] + [toks[g0:g1]]
    for a, b in zip(views, views[1:]):
        shown = a != VOCAB.mask_id
        assert np.array_equal(a[shown], b[shown])
        assert np.all(b[a != VOCAB.mask_id] != VOCAB.mask_id)
    for k, view in enumerate(views[1:]):
        assert np.array_equal(view != VOCAB.mask_id, trace.unmask_step <= k)


def test_t1_reveals_everything_at_once():
    toks, trace = diffuse_decode(model(), masked_layout(9), VOCAB, DecodeConfig(steps=1), RngStream(0))
    assert trace.step_counts == [9] and np.all(trace.unmask_step == 0)


def test_batch_matches_invariants_and_geometry():
    p = model()
    lays = [masked_layout(7) for _ in range(3)]
    out, traces = diffuse_decode_batch(p, lays, VOCAB, DecodeConfig(steps=4), RngStream(1))
    assert out.shape == (3, len(lays[0]))
    for tr in traces:
        assert tr.step_counts == schedule_counts(7, 4)
    with pytest.raises(InvalidArgument):
        diffuse_decode_batch(p, [masked_layout(7), masked_layout(8)], VOCAB, DecodeConfig(), RngStream(0))


class TestConstrained:
    def test_empty_mask_returns_input(self):
        lay = build_layout([5], [], 4, VOCAB, target=[7, 8, 9, 10])
        toks, trace = constrained_diffuse_decode(model(), lay, [], VOCAB, DecodeConfig(), RngStream(0))
        assert np.array_equal(toks, lay.array) and trace.forward_pass_count == 0

    def test_full_mask_equals_diffuse(self):
        p = model(seed=2)
        lay = masked_layout(6)
        a, _ = diffuse_decode(p, lay, VOCAB, DecodeConfig(steps=3), RngStream(4))
        b, _ = constrained_diffuse_decode(p, lay, range(6), VOCAB, DecodeConfig(steps=3), RngStream(4))
        assert np.array_equal(a, b)

    @settings(max_examples=40, deadline=None)
    @given(data=st.data())
    def test_frozen_positions_bit_identical(self, data):
        n = data.draw(st.integers(2, 16))
        s0, s1 = VOCAB.speech_range
        target = data.draw(st.lists(st.integers(s0, s1 - 1), min_size=n, max_size=n))
        mask = data.draw(st.sets(st.integers(0, n - 1), min_size=1))
        lay = build_layout([5, 6], [], n, VOCAB, target=target)
        toks, trace = constrained_diffuse_decode(model(), lay, mask, VOCAB, DecodeConfig(steps=3),
                                                 RngStream(0))
        g0 = lay.target_span[0]
        frozen = [j for j in range(n) if j not in mask]
        assert np.array_equal(toks[g0:][frozen], lay.array[g0:][frozen])
        assert sum(trace.step_counts) == len(mask)
        assert np.all(trace.unmask_step[frozen] == -1)

    def test_mask_outside_target(self):
        with pytest.raises(InvalidArgument):
            constrained_diffuse_decode(model(), masked_layout(3), [3], VOCAB, DecodeConfig(), RngStream(0))

    def test_padding_gives_identical_output(self):
        p = model(seed=3)
        lay = masked_layout(10)
        a, _ = diffuse_decode(p, lay, VOCAB, DecodeConfig(steps=5), RngStream(2))
        b, tr = diffuse_decode(p, lay, VOCAB, DecodeConfig(steps=5), RngStream(2), pad_to=40)
        assert np.array_equal(a, b) and tr.step_costs == [40] * 5
        with pytest.raises(InvalidArgument):
            diffuse_decode(p, lay, VOCAB, DecodeConfig(), RngStream(2), pad_to=5)


class TestAutoregressive:
    def test_cached_equals_uncached(self):
        p = model("causal", seed=4)
        lay = masked_layout(12, prompt=(8, 9))
        a, ta = ar_decode(p, lay, VOCAB, True, rng=RngStream(3))
        b, tb = ar_decode(p, lay, VOCAB, False, rng=RngStream(3))
        assert np.array_equal(a, b)
        g0 = lay.target_span[0]
        assert ta.forward_pass_count == tb.forward_pass_count == 12
        assert ta.step_costs == [g0] + [1] * 11
        assert tb.step_costs == list(range(g0, g0 + 12))
        assert ta.unmask_step.tolist() == list(range(12))

    def test_seeded(self):
        p = model("causal", seed=4)
        lay = masked_layout(6)
        assert np.array_equal(ar_decode(p, lay, VOCAB, True, rng=RngStream(9))[0],
                              ar_decode(p, lay, VOCAB, True, rng=RngStream(9))[0])


@pytest.mark.parametrize("kw", [dict(steps=0), dict(steps=2.5), dict(temperature=0.0),
                                dict(confidence_temperature=-1.0), dict(top_p=0.0),
                                dict(top_p=1.5), dict(confidence_kind="loudest")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DecodeConfig(**kw)


def test_config_defaults():
    c = DecodeConfig()
    assert (c.temperature, c.top_p, c.confidence_temperature, c.confidence_kind) == (
        0.986, 0.586, 0.424, "top_k_margin")


def test_trace_json_round_trip():
    tr = DecodeTrace(np.array([2, 0, 1]), [1, 1, 1], 3, 0.01, [9, 9, 9])
    back = DecodeTrace.from_json(tr.to_json())
    assert np.array_equal(back.unmask_step, tr.unmask_step) and back.step_counts == tr.step_counts
    assert back.rows()[0] == {"position": 0, "unmask_step": 2}
