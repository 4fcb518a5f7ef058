import numpy as np
import pytest

from maskdiff.core import RngStream
from maskdiff.data import load_dataset, make_example, max_layout_len, sample_examples, save_dataset, vocab_for
from maskdiff.errors import InvalidArgument
from maskdiff.synth import Sample


def test_chain_prompt_split(sticky3):
    v = vocab_for(sticky3)
    ex = make_example(sticky3, Sample(np.array([0, 1, 2, 2, 1])), v, prompt_len=2)
    assert list(v.symbols(ex.layout.prompt)) == [0, 1]
    assert list(v.symbols(ex.layout.target)) == [2, 2, 1]
    assert len(ex.layout) <= max_layout_len(sticky3)
    with pytest.raises(InvalidArgument):
        make_example(sticky3, Sample(np.zeros(5, int)), v, prompt_len=5)


def test_expansion_example(jitter_expansion):
    v = vocab_for(jitter_expansion)
    ex = sample_examples(jitter_expansion, RngStream(0), 1, v)[0]
    assert list(ex.layout.text - v.text_range[0]) == list(ex.sample.text)
    assert ex.alignment.spans[-1][1] == ex.layout.target_len
    assert len(ex.layout) <= max_layout_len(jitter_expansion)
    assert set(ex.masked_layout(v.mask_id).target) == {v.mask_id}


@pytest.mark.parametrize("which", ["sticky3", "jitter_expansion"])
def test_dataset_round_trip(tmp_path, request, which):
    spec = request.getfixturevalue(which)
    ex = sample_examples(spec, RngStream(1), 12, vocab_for(spec), 0)
    save_dataset(tmp_path / "d.mdtc", spec, ex, seed=1)
    spec2, ex2, meta = load_dataset(tmp_path / "d.mdtc")
    assert spec2 == spec and meta["count"] == 12 and meta["seed"] == 1
    for a, b in zip(ex, ex2):
        assert a.layout == b.layout
        assert np.array_equal(a.sample.symbols, b.sample.symbols)
        assert a.alignment == b.alignment


def test_load_rejects_checkpoints(tmp_path):
    from maskdiff.core import write_container
    write_container(tmp_path / "x.mdtc", {"a": np.zeros(1)}, {"kind": "checkpoint"})
    with pytest.raises(InvalidArgument):
        load_dataset(tmp_path / "x.mdtc")
