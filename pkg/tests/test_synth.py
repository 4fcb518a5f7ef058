import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdiff.core import RngStream
from maskdiff.errors import InvalidArgument, ResourceLimit, ZeroSupport
from maskdiff.synth import (ENUM_BUDGET, MarkovChain, NoisyChain, TextExpansion, copy_chain,
                            exact_conditional, exact_joint, iid_uniform, log_prob, random_codebook,
                            sample_chain_batch, sample_sequence, spec_from_config, spec_to_config,
                            sticky_trans)

from conftest import random_chain


def brute_chain_prob(spec, x):
    """Product of init/transition entries, summed over hidden paths for noisy chains."""
    init, trans, emit = (np.asarray(a) for a in spec.hidden)
    total = 0.0
    for h in itertools.product(range(spec.V), repeat=len(x)):
        p = init[h[0]] * emit[h[0], x[0]]
        for j in range(1, len(x)):
            p *= trans[h[j - 1], h[j]] * emit[h[j], x[j]]
        total += p
    return total


@pytest.mark.parametrize("make", [
    lambda: MarkovChain((0.2, 0.5, 0.3), sticky_trans(3, 0.7), 4),
    lambda: NoisyChain((0.5, 0.5), ((0.9, 0.1), (0.3, 0.7)), 0.2, 5),
    lambda: iid_uniform(4, 3),
])
def test_joint_matches_path_sum(make):
    spec = make()
    table = exact_joint(spec)
    assert table.shape == (spec.V,) * spec.n
    assert table.sum() == pytest.approx(1.0, abs=1e-13)
    for x in itertools.product(range(spec.V), repeat=spec.n):
        assert table[x] == pytest.approx(brute_chain_prob(spec, x), abs=1e-15)


def test_joint_table_is_read_only(sticky3):
    with pytest.raises(ValueError):
        exact_joint(sticky3)[(0,) * 5] = 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), V=st.integers(2, 3), n=st.integers(2, 5))
def test_log_prob_agrees_with_table(seed, V, n):
    spec = random_chain(seed, V, n)
    noisy = NoisyChain(spec.init, spec.trans, 0.15, n)
    for s in (spec, noisy):
        table = exact_joint(s)
        for x in itertools.product(range(V), repeat=n):
            assert log_prob(s, x) == pytest.approx(math.log(table[x]), abs=1e-10)


def test_log_prob_impossible_sequence_is_minus_inf():
    assert log_prob(copy_chain(2, 3), [0, 1, 1]) == -math.inf


def test_conditional_against_ratio(noisy3):
    table = exact_joint(noisy3)
    rev = {0: 2, 3: 1}
    got = exact_conditional(noisy3, rev, 2)
    num = table[2, :, :, 1, :].sum(axis=(0, 2))
    np.testing.assert_allclose(got, num / num.sum(), atol=1e-12)


def test_conditional_errors(sticky3):
    with pytest.raises(InvalidArgument):
        exact_conditional(sticky3, {1: 0}, 1)
    with pytest.raises(InvalidArgument):
        exact_conditional(sticky3, {}, 7)
    with pytest.raises(ZeroSupport):
        exact_conditional(copy_chain(2, 3), {0: 0, 2: 1}, 1)


def test_noiseless_noisy_chain_reproduces_markov_draws():
    trans = sticky_trans(3, 0.6)
    a = sample_chain_batch(MarkovChain((1 / 3,) * 3, trans, 6), RngStream(1), 50)
    b = sample_chain_batch(NoisyChain((1 / 3,) * 3, trans, 0.0, 6), RngStream(1), 50)
    np.testing.assert_array_equal(a, b)


def test_chain_sampling_frequencies():
    spec = NoisyChain((0.6, 0.4), ((0.8, 0.2), (0.3, 0.7)), 0.1, 3)
    draws = sample_chain_batch(spec, RngStream(2), 40_000)
    codes = draws @ np.array([4, 2, 1])
    freq = np.bincount(codes, minlength=8) / len(codes)
    p = exact_joint(spec).ravel()
    sigma = np.sqrt(p * (1 - p) / len(codes))
    assert np.all(np.abs(freq - p) <= 4 * sigma)


class TestTextExpansion:
    def test_expansion_and_alignment(self, jitter_expansion):
        s = sample_sequence(jitter_expansion, RngStream(5))
        pos = 0
        for y, (a, b) in zip(s.text, s.alignment.spans):
            assert a == pos and b - a in (2, 3)
            assert list(s.symbols[a:b]) == jitter_expansion.expand(int(y), b - a)
            pos = b
        assert pos == len(s.symbols)

    def test_no_jitter_lengths_fixed(self, expansion):
        for k in range(20):
            s = sample_sequence(expansion, RngStream(k))
            assert len(s.symbols) == expansion.n_text * expansion.L

    def test_joint_sums_to_one(self, jitter_expansion):
        table = exact_joint(jitter_expansion)
        assert sum(table.values()) == pytest.approx(1.0, abs=1e-12)

    def test_conditional_log_prob(self, jitter_expansion):
        # text (0, 3): [0 1 (1)] [3 0 (0)]
        assert math.exp(log_prob(jitter_expansion, [0, 1, 3, 0], [0, 3])) == pytest.approx(0.25)
        assert math.exp(log_prob(jitter_expansion, [0, 1, 1, 3, 0, 0], [0, 3])) == pytest.approx(0.25)
        assert log_prob(jitter_expansion, [0, 1, 3], [0, 3]) == -math.inf

    def test_marginal_log_prob_matches_table(self, jitter_expansion):
        table = exact_joint(jitter_expansion)
        for seq, p in list(table.items())[:30]:
            assert log_prob(jitter_expansion, seq) == pytest.approx(math.log(p), abs=1e-12)

    @pytest.mark.parametrize("kw", [
        dict(codebook=((0, 1), (2,))),
        dict(codebook=((0, 9),)),
        dict(dur_jitter=2),
        dict(n_text=0),
    ])
    def test_validation(self, kw):
        base = dict(codebook=((0, 1), (2, 3)), n_text=2, V=4, dur_jitter=0)
        with pytest.raises(InvalidArgument):
            TextExpansion(**{**base, **kw})


def test_random_codebook_is_distinct_and_seeded():
    a = random_codebook(8, 12, 3, RngStream(7))
    assert len(set(a)) == 8 and all(len(r) == 3 for r in a)
    assert a == random_codebook(8, 12, 3, RngStream(7))
    with pytest.raises(InvalidArgument):
        random_codebook(5, 2, 2, RngStream(0))


def test_enumeration_budget():
    with pytest.raises(ResourceLimit):
        exact_joint(iid_uniform(4, 10))  # 4^10 = 1048576 entries
    assert exact_joint(iid_uniform(3, 12)).size == 3 ** 12 <= ENUM_BUDGET


@pytest.mark.parametrize("bad", [
    dict(init=(0.5, 0.6), trans=((1, 0), (0, 1)), n=3),
    dict(init=(0.5, 0.5), trans=((1, 0),), n=3),
    dict(init=(0.5, 0.5), trans=((1, 0), (0, 1)), n=0),
])
def test_chain_validation(bad):
    with pytest.raises(InvalidArgument):
        MarkovChain(**bad)


@pytest.mark.parametrize("spec", [
    NoisyChain((0.25, 0.75), ((0.9, 0.1), (0.2, 0.8)), 0.05, 4),
    MarkovChain((0.1, 0.2, 0.7), sticky_trans(3, 0.5), 6),
    TextExpansion(((0, 1, 2), (2, 2, 1)), 3, 3, 1),
])
def test_config_round_trip(spec):
    assert spec_from_config(spec_to_config(spec)) == spec


def test_config_shorthands():
    spec = spec_from_config({"kind": "noisy", "n": "4", "V": "3", "stay": "0.8", "eta": "0.1"})
    assert spec == NoisyChain((1 / 3,) * 3, sticky_trans(3, 0.8), 0.1, 4)
    with pytest.raises(InvalidArgument):
        spec_from_config({"kind": "noisy"})
    with pytest.raises(InvalidArgument):
        spec_from_config({"kind": "fractal", "n": "3"})
