"""AR pretraining, masked-diffusion fine-tuning and the initialisation ablation."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from maskdiff.core import RngStream, apply_random_mask, read_container, write_container
from maskdiff.data import Example, max_layout_len, sample_examples, vocab_for
from maskdiff.decode import DecodeConfig, diffuse_decode_batch
from maskdiff.errors import InvalidArgument, NumericError
from maskdiff.net import (AttentionMode, ModelConfig, ModelParams, ar_batch, batch_loss, diffusion_batch,
                          init_from_ar, init_params, loss_and_grad)
from maskdiff.synth import ProcessSpec

log = logging.getLogger(__name__)

T_MIN = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 100
    eval_size: int = 512
    prompt_len: int = 0

    def __post_init__(self):
        if self.grad_clip_norm <= 0:
            raise InvalidArgument("grad_clip_norm must be positive")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgument("steps must be >= 0 and batch_size >= 1")


class AblationArm(str, enum.Enum):
    FROM_SCRATCH = "from_scratch"
    AR_INIT_NO_SHIFT = "ar_init_no_shift"
    AR_INIT_WITH_SHIFT = "ar_init_shift"
    AR_WEIGHTS_NO_TRAINING = "ar_weights_no_training"


class Adam:
    def __init__(self, params: ModelParams, config: TrainConfig):
        self.cfg = config
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> float:
        """Clip to the global norm bound, apply one update, return the clipped norm."""
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        scale = min(1.0, self.cfg.grad_clip_norm / norm) if norm > 0 else 1.0
        self.t += 1
        c = self.cfg
        lr_t = c.learning_rate * math.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for k, g in grads.items():
            g = g * scale
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params.tensors[k] -= lr_t * self.m[k] / (np.sqrt(self.v[k]) + c.adam_eps)
        return norm * scale


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[dict] = field(default_factory=list)  # step, train_loss, eval_loss
    grad_norms: list[float] = field(default_factory=list)
    step: int = 0
    optimizer: Adam | None = None


# --- objectives on example lists -------------------------------------------

def sample_t(rng: RngStream) -> float:
    """Masking rate ~ U(0, 1), redrawn below ``T_MIN`` to bound the 1/t weight."""
    while True:
        t = float(rng.random())
        if t >= T_MIN:
            return t


def stratified_t(count: int, rng: RngStream) -> np.ndarray:
    """One rate per equal-width stratum of [T_MIN, 1), shuffled; same law as :func:`sample_t`."""
    ts = T_MIN + (1.0 - T_MIN) * (np.arange(count) + rng.random(count)) / count
    return ts[np.argsort(rng.random(count), kind="stable")]


def diffusion_inputs(examples: list[Example], rng: RngStream, mask_id: int, ts=None):
    """Mask each example at its own rate (``ts`` or fresh draws from :func:`sample_t`)."""
    given = ts
    ts, masked, states = [], [], []
    for k, e in enumerate(examples):
        t = sample_t(rng) if given is None else float(given[k])
        toks, st = apply_random_mask(e.layout, t, rng, mask_id)
        ts.append(t)
        masked.append(toks)
        states.append(st)
    return masked, states, ts


@dataclass
class EvalSet:
    examples: list[Example]
    masked: list[np.ndarray]
    states: list
    ts: list[float]


def make_eval_set(spec: ProcessSpec, seed: int, size: int, prompt_len: int = 0) -> EvalSet:
    rng = RngStream(seed).child("eval")
    vocab = vocab_for(spec)
    ex = sample_examples(spec, rng.child("data"), size, vocab, prompt_len)
    # stratified rates cut the variance of the 1/t-weighted estimate without biasing it
    ts = stratified_t(size, rng.child("t"))
    masked, states, ts = diffusion_inputs(ex, rng.child("mask"), vocab.mask_id, ts)
    return EvalSet(ex, masked, states, ts)


def eval_diffusion_loss(params: ModelParams, ev: EvalSet, shift: bool | None = None,
                        chunk: int = 128) -> float:
    """Mean per-sequence masked objective over a fixed evaluation set."""
    shift = params.config.label_shift if shift is None else shift
    total = 0.0
    for i in range(0, len(ev.examples), chunk):
        sl = slice(i, i + chunk)
        batch = diffusion_batch([e.layout for e in ev.examples[sl]], ev.masked[sl], ev.states[sl],
                                ev.ts[sl], shift)
        total += batch_loss(params, batch) * len(ev.examples[sl])
    return total / len(ev.examples)


def eval_ar_loss(params: ModelParams, examples: list[Example], chunk: int = 128) -> float:
    total = 0.0
    for i in range(0, len(examples), chunk):
        part = examples[i:i + chunk]
        total += batch_loss(params, ar_batch([e.layout for e in part], params.config.label_shift)) * len(part)
    return total / len(examples)


def decode_accuracy(params: ModelParams, spec: ProcessSpec, examples: list[Example],
                    decode_config: DecodeConfig, rng: RngStream) -> float:
    """Token exact-match rate of diffusion decoding against the sampled targets."""
    vocab = vocab_for(spec)
    groups: dict[tuple, list[Example]] = {}
    for e in examples:
        groups.setdefault((len(e.layout), e.layout.target_span), []).append(e)
    hits = total = 0
    for key in sorted(groups):
        grp = groups[key]
        out, _ = diffuse_decode_batch(params, [e.masked_layout(vocab.mask_id) for e in grp], vocab,
                                      decode_config, rng)
        g0, g1 = grp[0].layout.target_span
        truth = np.stack([e.layout.target for e in grp])
        hits += int((out[:, g0:g1] == truth).sum())
        total += truth.size
    return hits / total


# --- training loops --------------------------------------------------------

def default_model_config(spec: ProcessSpec, **overrides) -> ModelConfig:
    vocab = vocab_for(spec)
    kw = dict(vocab_size=vocab.size, max_len=max(128, max_layout_len(spec)))
    kw.update(overrides)
    return ModelConfig(**kw)


def _check(loss, step, what):
    if not math.isfinite(loss):
        raise NumericError(f"{what} diverged at step {step}: loss={loss}")


def pretrain_ar(spec: ProcessSpec, model_config: ModelConfig, config: TrainConfig,
                rng: RngStream | None = None, eval_examples: list[Example] | None = None) -> TrainResult:
    """Causal next-token training on sampled layouts."""
    rng = rng or RngStream(config.seed)
    vocab = vocab_for(spec)
    cfg = ModelConfig(**{**asdict(model_config), "attention_mode": AttentionMode.CAUSAL.value,
                         "label_shift": True})
    params = init_params(cfg, rng.child("ar-init"))
    data = rng.child("ar-data")
    if eval_examples is None:
        eval_examples = sample_examples(spec, rng.child("ar-eval"), min(config.eval_size, 256), vocab,
                                        config.prompt_len)
    opt = Adam(params, config)
    res = TrainResult(params, optimizer=opt)
    for step in range(1, config.steps + 1):
        ex = sample_examples(spec, data, config.batch_size, vocab, config.prompt_len)
        loss, grads = loss_and_grad(params, ar_batch([e.layout for e in ex]))
        _check(loss, step, "AR pretraining")
        res.grad_norms.append(opt.step(params, grads))
        if step % config.eval_every == 0 or step == config.steps:
            ev = eval_ar_loss(params, eval_examples)
            res.curve.append({"step": step, "train_loss": loss, "eval_loss": ev})
            log.debug("ar step %d loss %.4f eval %.4f", step, loss, ev)
    res.step = config.steps
    return res


def finetune_diffusion(init: ModelParams, spec: ProcessSpec, config: TrainConfig,
                       rng: RngStream | None = None, eval_set: EvalSet | None = None,
                       optimizer: Adam | None = None, start_step: int = 0) -> TrainResult:
    """Bidirectional masked-diffusion training with the 1/t-weighted objective.

    The label-shift convention follows ``init.config.label_shift``.
    """
    rng = rng or RngStream(config.seed)
    vocab = vocab_for(spec)
    params = init.copy(attention_mode=AttentionMode.BIDIRECTIONAL.value)
    shift = params.config.label_shift
    data, masks = rng.child("dm-data"), rng.child("dm-mask")
    # replay the streams so a resumed run continues the same data sequence
    for _ in range(start_step):
        ex = sample_examples(spec, data, config.batch_size, vocab, config.prompt_len)
        diffusion_inputs(ex, masks, vocab.mask_id)
    opt = optimizer or Adam(params, config)
    res = TrainResult(params, optimizer=opt)
    for step in range(start_step + 1, start_step + config.steps + 1):
        ex = sample_examples(spec, data, config.batch_size, vocab, config.prompt_len)
        masked, states, ts = diffusion_inputs(ex, masks, vocab.mask_id)
        if not any(s.masked.any() for s in states):
            loss, grads = 0.0, {k: np.zeros_like(v) for k, v in params.tensors.items()}
        else:
            loss, grads = loss_and_grad(params, diffusion_batch([e.layout for e in ex], masked, states,
                                                                ts, shift))
        _check(loss, step, "diffusion fine-tuning")
        res.grad_norms.append(opt.step(params, grads))
        if eval_set is not None and (step % config.eval_every == 0 or step == start_step + config.steps):
            ev = eval_diffusion_loss(params, eval_set)
            res.curve.append({"step": step, "train_loss": loss, "eval_loss": ev})
            log.debug("dm step %d loss %.4f eval %.4f", step, loss, ev)
    res.step = start_step + config.steps
    return res


def build_arm(arm: AblationArm, ar_params: ModelParams | None, model_config: ModelConfig,
              rng: RngStream, mask_id: int) -> ModelParams:
    arm = AblationArm(arm)
    if arm is AblationArm.FROM_SCRATCH:
        cfg = ModelConfig(**{**asdict(model_config), "label_shift": True,
                             "attention_mode": AttentionMode.BIDIRECTIONAL.value})
        return init_params(cfg, rng.child("scratch-init"))
    if ar_params is None:
        raise InvalidArgument(f"arm {arm.value} needs AR weights")
    params = init_from_ar(ar_params, rng.child("mask-row"), mask_id)
    if arm is AblationArm.AR_INIT_NO_SHIFT:
        params = params.copy(label_shift=False)
    return params


@dataclass
class AblationRow:
    arm: str
    seed: int
    steps: int
    eval_loss: float
    decode_accuracy: float


def run_ablation(spec: ProcessSpec, arms, model_config: ModelConfig, finetune: TrainConfig,
                 pretrain: TrainConfig, seeds, decode_config: DecodeConfig | None = None,
                 n_decode: int = 64) -> list[AblationRow]:
    """Matched-compute comparison of initialisation strategies.

    Every trained arm of a seed sees the same data, masks and evaluation set
    and runs exactly ``finetune.steps`` optimizer steps.
    """
    arms = [AblationArm(a) for a in arms]
    if len(arms) < 2:
        raise InvalidArgument("ablation needs at least two arms")
    decode_config = decode_config or DecodeConfig(steps=8)
    vocab = vocab_for(spec)
    rows = []
    for seed in seeds:
        rng = RngStream(seed)
        ev = make_eval_set(spec, seed, finetune.eval_size, finetune.prompt_len)
        needs_ar = any(a is not AblationArm.FROM_SCRATCH for a in arms)
        ar = pretrain_ar(spec, model_config, pretrain, rng.child("pretrain")).params if needs_ar else None
        dec_examples = ev.examples[:n_decode]
        for arm in arms:
            params = build_arm(arm, ar, model_config, rng, vocab.mask_id)
            steps = 0
            if arm is not AblationArm.AR_WEIGHTS_NO_TRAINING:
                params = finetune_diffusion(params, spec, finetune, rng.child("finetune")).params
                steps = finetune.steps
            rows.append(AblationRow(
                arm.value, int(seed), steps, eval_diffusion_loss(params, ev),
                decode_accuracy(params, spec, dec_examples, decode_config, rng.child("decode"))))
            log.info("ablation seed=%s arm=%s loss=%.4f acc=%.3f", seed, arm.value,
                     rows[-1].eval_loss, rows[-1].decode_accuracy)
    return rows


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, res: TrainResult, meta: dict):
    tensors = dict(res.params.tensors)
    if res.optimizer is not None:
        tensors.update({f"opt.m.{k}": v for k, v in res.optimizer.m.items()})
        tensors.update({f"opt.v.{k}": v for k, v in res.optimizer.v.items()})
    meta = {"model": asdict(res.params.config), "step": res.step,
            "opt_t": res.optimizer.t if res.optimizer else 0, **meta}
    return write_container(path, tensors, meta)


def load_checkpoint(path, train_config: TrainConfig | None = None):
    tensors, meta = read_container(path)
    cfg = ModelConfig(**meta["model"])
    params = ModelParams(cfg, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    opt = None
    if train_config is not None and any(k.startswith("opt.") for k in tensors):
        opt = Adam(params, train_config)
        opt.m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        opt.v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")}
        opt.t = int(meta.get("opt_t", 0))
    return params, opt, meta
