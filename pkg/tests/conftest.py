import json
from pathlib import Path

import numpy as np
import pytest

from maskdiff.core import RngStream
from maskdiff.data import vocab_for
from maskdiff.net import ModelConfig, init_params
from maskdiff.synth import MarkovChain, NoisyChain, TextExpansion, copy_chain, sticky_trans

GOLDENS = Path(__file__).parent / "goldens.json"

# one "criterion k: PASS/FAIL ..." line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def goldens():
    return json.loads(GOLDENS.read_text())


@pytest.fixture
def sticky3():
    return MarkovChain((1 / 3,) * 3, sticky_trans(3, 0.8), 5)


@pytest.fixture
def noisy3():
    return NoisyChain((1 / 3,) * 3, sticky_trans(3, 0.8), 0.1, 5)


@pytest.fixture
def expansion():
    book = ((0, 1), (2, 3), (1, 1), (3, 0))
    return TextExpansion(book, n_text=3, V=4, dur_jitter=0)


@pytest.fixture
def jitter_expansion():
    book = ((0, 1), (2, 3), (1, 1), (3, 0))
    return TextExpansion(book, n_text=3, V=4, dur_jitter=1)


@pytest.fixture
def tiny_model(expansion):
    """Untrained bidirectional model sized for the small expansion spec."""
    vocab = vocab_for(expansion)
    cfg = ModelConfig(vocab_size=vocab.size, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=24)
    return init_params(cfg, RngStream(3), std=0.3)


def random_chain(seed, V, n):
    """A chain with strictly positive random init and transitions."""
    g = np.random.default_rng(seed)
    init = g.dirichlet(np.ones(V))
    trans = g.dirichlet(np.ones(V), size=V)
    init /= init.sum()
    trans /= trans.sum(axis=1, keepdims=True)
    return MarkovChain(tuple(init), tuple(tuple(r) for r in trans), n)


__all__ = ["ACCEPTANCE_LINES", "random_chain", "copy_chain"]
