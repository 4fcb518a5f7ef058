"""Turning process samples into model layouts, and dataset persistence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskdiff.core import RngStream, SequenceLayout, Vocab, build_layout, read_container, write_container
from maskdiff.errors import InvalidArgument
from maskdiff.synth import (GroundTruthAlignment, ProcessSpec, Sample, TextExpansion, sample_chain_batch,
                            sample_sequence, spec_from_config, spec_to_config)


@dataclass(frozen=True)
class Example:
    layout: SequenceLayout  # target span holds the realised tokens
    sample: Sample
    prompt_len: int = 0

    @property
    def alignment(self) -> GroundTruthAlignment | None:
        return self.sample.alignment

    def masked_layout(self, mask_id: int) -> SequenceLayout:
        return self.layout.with_target([mask_id] * self.layout.target_len)


def vocab_for(spec: ProcessSpec) -> Vocab:
    """Chains use a single constant text token; expansions get one text id per symbol."""
    n_text = spec.n_text_symbols if isinstance(spec, TextExpansion) else 1
    return Vocab.build(n_text, spec.V)


def max_layout_len(spec: ProcessSpec) -> int:
    if isinstance(spec, TextExpansion):
        return spec.n_text + spec.max_target_len + 3
    return spec.n + 4


def make_example(spec: ProcessSpec, sample: Sample, vocab: Vocab, prompt_len: int = 0) -> Example:
    """Chains: the first ``prompt_len`` symbols become the visible prompt and
    the rest the target. Expansions: text ids from the sample, whole target."""
    if isinstance(spec, TextExpansion):
        layout = build_layout(vocab.text(sample.text), [], len(sample.symbols), vocab,
                              target=vocab.speech(sample.symbols))
        return Example(layout, sample, 0)
    if not 0 <= prompt_len < len(sample.symbols):
        raise InvalidArgument("prompt_len must leave at least one target position")
    ids = vocab.speech(sample.symbols)
    layout = build_layout([vocab.text_range[0]], ids[:prompt_len], len(ids) - prompt_len, vocab,
                          target=ids[prompt_len:])
    return Example(layout, sample, prompt_len)


def sample_examples(spec: ProcessSpec, rng: RngStream, count: int, vocab: Vocab,
                    prompt_len: int = 0) -> list[Example]:
    if isinstance(spec, TextExpansion):
        return [make_example(spec, sample_sequence(spec, rng), vocab) for _ in range(count)]
    seqs = sample_chain_batch(spec, rng, count)
    return [make_example(spec, Sample(s), vocab, prompt_len) for s in seqs]


def save_dataset(path, spec: ProcessSpec, examples: list[Example], seed: int, prompt_len: int = 0):
    n = max(len(e.layout) for e in examples)
    tokens = np.full((len(examples), n), -1, dtype=np.int64)
    spans = np.zeros((len(examples), 6), dtype=np.int64)
    for r, e in enumerate(examples):
        tokens[r, :len(e.layout)] = e.layout.array
        spans[r] = [*e.layout.text_span, *e.layout.prompt_span, *e.layout.target_span]
    tensors = {"tokens": tokens, "spans": spans}
    if isinstance(spec, TextExpansion):
        k = spec.n_text
        align = np.array([[b for span in e.alignment.spans for b in span] for e in examples])
        tensors["alignment"] = align.reshape(len(examples), k, 2)
    meta = {"kind": "dataset", "process": spec_to_config(spec), "seed": int(seed),
            "prompt_len": int(prompt_len), "count": len(examples)}
    return write_container(path, tensors, meta)


def load_dataset(path) -> tuple[ProcessSpec, list[Example], dict]:
    tensors, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise InvalidArgument(f"{path} is not a dataset container")
    spec = spec_from_config(meta["process"])
    vocab = vocab_for(spec)
    out = []
    for r, (row, sp) in enumerate(zip(tensors["tokens"], tensors["spans"])):
        toks = tuple(int(t) for t in row if t >= 0)
        layout = SequenceLayout(toks, (int(sp[0]), int(sp[1])), (int(sp[2]), int(sp[3])),
                                (int(sp[4]), int(sp[5])))
        if isinstance(spec, TextExpansion):
            align = GroundTruthAlignment(tuple((int(a), int(b)) for a, b in tensors["alignment"][r]))
            sample = Sample(vocab.symbols(layout.target), layout.text - vocab.text_range[0], align)
        else:
            sample = Sample(vocab.symbols(np.concatenate([layout.prompt, layout.target])))
        out.append(Example(layout, sample, meta.get("prompt_len", 0)))
    return spec, out, meta
