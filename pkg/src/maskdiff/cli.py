"""Command-line entry point: ``maskdiff <command> [options]``.

Every command reads an optional INI config (``--config``), lets flags
override it, writes its outputs to the output directory (flag, then the
``MDTC_OUT`` environment variable, then ``[run] out_dir``, then ``runs``)
and records the fully resolved configuration as ``<command>.resolved.ini``.

Exit codes: 0 success, 2 usage error, 3 resource limit, 4 numeric error,
1 any other failure (for example an unwritable output path).
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from maskdiff import __version__
from maskdiff.core import RngStream, build_layout
from maskdiff.errors import InvalidArgument, MaskDiffError, NumericError, ResourceLimit

log = logging.getLogger("maskdiff")

ARMS = ("ar", "from_scratch", "ar_init_no_shift", "ar_init_shift", "ar_weights_no_training")
MODEL_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "max_len")
DEFAULT_OUT = "runs"


class UsageError(InvalidArgument):
    pass


# --- configuration -----------------------------------------------------------------

def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as ``V`` are case-sensitive
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
    return cp


def _section(cp, name) -> dict[str, str]:
    return dict(cp[name]) if cp.has_section(name) else {}


def _require(cp, name) -> dict[str, str]:
    if not cp.has_section(name):
        raise UsageError(f"config is missing the [{name}] section")
    return dict(cp[name])


def _set(cp, section, key, value):
    if value is None:
        return
    if not cp.has_section(section):
        cp.add_section(section)
    cp[section][key] = str(value)


def _typed(dc_type, section: dict[str, str], what: str):
    """Instantiate a dataclass from string values, rejecting unknown keys."""
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(section) - set(known)
    if unknown:
        raise UsageError(f"[{what}] has unknown keys: {sorted(unknown)}")
    kw = {}
    for k, v in section.items():
        default = getattr(dc_type, k, None)
        try:
            if isinstance(default, bool):
                kw[k] = v.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[k] = int(v)
            elif isinstance(default, float):
                kw[k] = float(v)
            else:
                kw[k] = v.strip()
        except ValueError:
            raise UsageError(f"[{what}] {k}: cannot parse {v!r}") from None
    return dc_type(**kw)


def _ints(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"{what}: expected integers, got {text!r}") from None


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"{what}: expected numbers, got {text!r}") from None


def out_dir(args, cp) -> Path:
    d = args.out or os.environ.get("MDTC_OUT") or _section(cp, "run").get("out_dir") or DEFAULT_OUT
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def seed_of(args, cp) -> int:
    if args.seed is not None:
        return args.seed
    raw = _section(cp, "run").get("seed")
    if raw is None:
        raise UsageError("a seed is required: pass --seed or set [run] seed")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"[run] seed must be an integer, got {raw!r}") from None


def write_resolved(cp, out: Path, command: str, seed: int, extra: dict[str, dict] | None = None) -> Path:
    _set(cp, "run", "seed", seed)
    _set(cp, "run", "out_dir", out)
    _set(cp, "run", "command", command)
    _set(cp, "run", "version", __version__)
    for sec, values in (extra or {}).items():
        for k, v in values.items():
            _set(cp, sec, k, v)
    path = out / f"{command}.resolved.ini"
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def _spec(cp):
    from maskdiff.synth import spec_from_config
    return spec_from_config(_require(cp, "process"))


def _model_config(cp, spec):
    from maskdiff.train import default_model_config
    sec = _section(cp, "model")
    unknown = set(sec) - set(MODEL_KEYS)
    if unknown:
        raise UsageError(f"[model] has unknown keys: {sorted(unknown)}")
    try:
        return default_model_config(spec, **{k: int(v) for k, v in sec.items()})
    except ValueError:
        raise UsageError("[model] values must be integers") from None


def _decode_config(cp, args=None):
    from maskdiff.decode import DecodeConfig
    if args is not None:
        _set(cp, "decode", "steps", getattr(args, "steps", None))
    return _typed(DecodeConfig, _section(cp, "decode"), "decode")


def _load_model(path):
    from maskdiff.synth import spec_from_config
    from maskdiff.train import load_checkpoint
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    params, _, meta = load_checkpoint(path)
    if "process" not in meta:
        raise UsageError(f"{path} has no process description")
    return params, spec_from_config(meta["process"]), meta


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


# --- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from maskdiff.data import sample_examples, save_dataset, vocab_for
    cp = load_config(args.config)
    spec = _spec(cp)
    seed = seed_of(args, cp)
    data = _section(cp, "data")
    count = args.count if args.count is not None else int(data.get("count", 1000))
    prompt_len = args.prompt_len if args.prompt_len is not None else int(data.get("prompt_len", 0))
    if count < 1:
        raise UsageError("count must be positive")
    out = out_dir(args, cp)
    examples = sample_examples(spec, RngStream(seed).child("gen-data"), count, vocab_for(spec), prompt_len)
    path = save_dataset(out / "dataset.mdtc", spec, examples, seed, prompt_len)
    write_resolved(cp, out, "gen-data", seed, {"data": {"count": count, "prompt_len": prompt_len}})
    print(f"wrote {count} sequences to {path} ({type(spec).__name__}, "
          f"{spec.V} speech symbols, seed {seed})")
    return 0


def cmd_train(args) -> int:
    from maskdiff.data import vocab_for
    from maskdiff.reporting import emit_csv
    from maskdiff.synth import spec_to_config
    from maskdiff.train import (AblationArm, TrainConfig, TrainResult, build_arm, eval_diffusion_loss,
                                finetune_diffusion, load_checkpoint, make_eval_set, pretrain_ar,
                                save_checkpoint)
    cp = load_config(args.config)
    seed = seed_of(args, cp)
    _set(cp, "train", "steps", args.steps)
    _set(cp, "train", "seed", seed)
    train_cfg = _typed(TrainConfig, _section(cp, "train"), "train")
    pre = {**_section(cp, "train"), **_section(cp, "pretrain")}
    pre_cfg = _typed(TrainConfig, pre, "pretrain")
    out = out_dir(args, cp)
    rng = RngStream(seed)
    start = 0
    opt = None
    if args.resume:
        if args.arm == "ar":
            raise UsageError("resuming is supported for diffusion arms only")
        params, opt, meta = load_checkpoint(args.resume, train_cfg)
        if meta.get("arm") != args.arm:
            raise UsageError(f"checkpoint arm {meta.get('arm')!r} differs from --arm {args.arm}")
        from maskdiff.synth import spec_from_config
        spec = spec_from_config(meta["process"])
        start = int(meta["step"])
    else:
        spec = _spec(cp)
        mcfg = _model_config(cp, spec)
    meta = {"kind": "checkpoint", "arm": args.arm, "process": spec_to_config(spec), "seed": seed}
    if args.arm == "ar":
        res = pretrain_ar(spec, mcfg, pre_cfg, rng.child("pretrain"))
        rows = res.curve
    else:
        arm = AblationArm(args.arm)
        if not args.resume:
            ar = None
            if arm is not AblationArm.FROM_SCRATCH:
                if args.ar_checkpoint:
                    ar, _, _ = load_checkpoint(args.ar_checkpoint)
                else:
                    ar = pretrain_ar(spec, mcfg, pre_cfg, rng.child("pretrain")).params
            params = build_arm(arm, ar, mcfg, rng, vocab_for(spec).mask_id)
        ev = make_eval_set(spec, seed, train_cfg.eval_size, train_cfg.prompt_len)
        if arm is AblationArm.AR_WEIGHTS_NO_TRAINING:
            res = TrainResult(params, [{"step": 0, "train_loss": float("nan"),
                                        "eval_loss": eval_diffusion_loss(params, ev)}])
        else:
            res = finetune_diffusion(params, spec, train_cfg, rng.child("finetune"), ev,
                                     optimizer=opt, start_step=start)
        rows = res.curve
    ckpt = save_checkpoint(out / f"{args.arm}.mdtc", res, meta)
    if rows:
        emit_csv(rows, out / f"{args.arm}_curve.csv", kind="training_curve",
                 note="losses in nats; eval_loss on a fixed held-out set")
    write_resolved(cp, out, "train", seed, {"train": asdict(train_cfg), "pretrain": asdict(pre_cfg),
                                            "model": {k: getattr(res.params.config, k) for k in MODEL_KEYS}})
    last = rows[-1] if rows else {}
    print(f"arm {args.arm}: step {res.step}, eval loss {last.get('eval_loss', float('nan')):.6f}; "
          f"checkpoint {ckpt}")
    return 0


def cmd_decode(args) -> int:
    from maskdiff.data import vocab_for
    from maskdiff.decode import diffuse_decode
    from maskdiff.reporting import emit_csv
    from maskdiff.synth import TextExpansion
    cp = load_config(args.config)
    seed = seed_of(args, cp)
    params, spec, _ = _load_model(args.checkpoint)
    dcfg = _decode_config(cp, args)
    vocab = vocab_for(spec)
    text = _ints(args.text, "--text") if args.text else [0]
    prompt = _ints(args.prompt, "--prompt") if args.prompt else []
    if args.target_len is not None:
        target_len = args.target_len
    elif isinstance(spec, TextExpansion):
        target_len = spec.L * len(text)
    else:
        target_len = spec.n - len(prompt)
    if target_len < 1:
        raise UsageError("target length must be positive")
    try:
        layout = build_layout(vocab.text(text), vocab.speech(prompt), target_len, vocab)
    except IndexError:
        raise UsageError("text or prompt symbol outside the vocabulary") from None
    out = out_dir(args, cp)
    rng = RngStream(seed).child("decode")
    results, rows = [], []
    for k in range(args.count):
        toks, trace = diffuse_decode(params, layout, vocab, dcfg, rng.child(k))
        g0, g1 = layout.target_span
        results.append({"text": text, "prompt": prompt,
                        "target": [int(s) for s in vocab.symbols(toks[g0:g1])],
                        "tokens": [int(t) for t in toks], "trace": json.loads(trace.to_json())})
        rows.extend({"trace": k, **r} for r in trace.rows())
    _dump(out / "decode.json", results if args.count > 1 else results[0])
    emit_csv(rows, out / "decode_trace.csv", kind="unmask_trace",
             note="unmask_step = decode step at which each target position was revealed")
    write_resolved(cp, out, "decode", seed, {"decode": asdict(dcfg)})
    for r in results:
        print(" ".join(str(s) for s in r["target"]))
    return 0


def cmd_verify_theory(args) -> int:
    from maskdiff.infomath import verify_theorem
    from maskdiff.reporting import emit_csv
    cp = load_config(args.config)
    spec = _spec(cp)
    theory = _section(cp, "theory")
    taus = _floats(args.tau or theory.get("tau", "0.25,0.5,0.75"), "--tau")
    max_subsets = args.max_subsets if args.max_subsets is not None else (
        int(theory["max_subsets"]) if "max_subsets" in theory else None)
    out = out_dir(args, cp)
    kw = {"max_subsets": max_subsets} if max_subsets is not None else {}
    rep = verify_theorem(spec, taus, **kw)
    emit_csv(rep.csv_rows(), out / "theory.csv", kind="theorem_check",
             note="kl_gap and eps in nats; margin = eps - kl_gap; positions 0-based")
    seed = args.seed if args.seed is not None else int(_section(cp, "run").get("seed", 0))
    write_resolved(cp, out, "verify-theory", seed,
                   {"theory": {"tau": ",".join(repr(t) for t in taus),
                               **({"max_subsets": max_subsets} if max_subsets else {})}})
    print(rep.summary())
    if not rep.passed:
        raise NumericError("bound violated; see theory.csv")
    return 0


def cmd_edit(args) -> int:
    from maskdiff.data import sample_examples, vocab_for
    from maskdiff.edit import (EditRequest, HeadId, apply_edit, attention_alignment, plan_edit,
                               select_alignment_head)
    from maskdiff.synth import TextExpansion
    cp = load_config(args.config)
    seed = seed_of(args, cp)
    params, spec, _ = _load_model(args.checkpoint)
    dcfg = _decode_config(cp, args)
    vocab = vocab_for(spec)
    req_text = Path(args.request).read_text() if Path(args.request).is_file() else args.request
    request = EditRequest.from_json(req_text)
    try:
        doc = json.loads(Path(args.tokens).read_text())
        if isinstance(doc, list):
            doc = doc[0]
        text, prompt, target = doc["text"], doc.get("prompt", []), doc["target"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
        raise UsageError(f"cannot read tokens file {args.tokens}: {exc}") from None
    layout = build_layout(vocab.text(text), vocab.speech(prompt), len(target), vocab,
                          target=vocab.speech(target))
    out = out_dir(args, cp)
    rng = RngStream(seed)
    if args.head:
        l, h = _ints(args.head, "--head")
        head = HeadId(l, h)
    else:
        if not isinstance(spec, TextExpansion):
            raise UsageError("automatic head selection needs a text-expansion process; pass --head")
        val = sample_examples(spec, rng.child("head-select"), args.n_validation, vocab)
        head = select_alignment_head(params, [e.layout for e in val], [e.alignment for e in val])[0]
    alignment = attention_alignment(params, layout, head)
    plan = plan_edit(request, alignment, layout, vocab)
    new_target, trace = apply_edit(params, plan, vocab, dcfg, rng.child("edit"))
    edited = [int(s) for s in vocab.symbols(new_target)]
    new_text = [int(t) for t in plan.layout.text - vocab.text_range[0]]
    _dump(out / "edit.json", {"head": asdict(head), "alignment": [list(s) for s in alignment.spans],
                              "alignment_fallback": alignment.fallback,
                              "plan": json.loads(plan.to_json()),
                              "before": {"text": text, "prompt": prompt, "target": target},
                              "after": {"text": new_text, "prompt": prompt, "target": edited},
                              "trace": json.loads(trace.to_json())})
    write_resolved(cp, out, "edit", seed, {"decode": asdict(dcfg)})
    print(" ".join(str(s) for s in edited))
    return 0


def cmd_bench(args) -> int:
    from maskdiff import bench
    from maskdiff.data import vocab_for
    from maskdiff.decode import DecodeTrace
    from maskdiff.reporting import emit_csv, parse_csv
    cp = load_config(args.config)
    seed = seed_of(args, cp)
    sec = _section(cp, "bench")
    sweep = _ints(args.sweep if args.sweep is not None else sec.get("sweep", "2,4,8,16,32"), "--sweep")
    if not sweep or any(t < 1 for t in sweep):
        raise UsageError("the sweep needs at least one positive step count")
    n_eval = args.n_eval if args.n_eval is not None else int(sec.get("n_eval", 64))
    lengths = _ints(args.lengths if args.lengths is not None else sec.get("lengths", ""), "--lengths")
    out = out_dir(args, cp)
    params, spec, meta = _load_model(args.checkpoint)
    ar = _load_model(args.ar_checkpoint)[0] if args.ar_checkpoint else None
    dcfg = _decode_config(cp)
    prompt_len = int(sec.get("prompt_len", _section(cp, "train").get("prompt_len", 0)))
    rows = bench.speed_quality_sweep(params, spec, sweep, n_eval, RngStream(seed).child("bench"), ar,
                                     prompt_len, dcfg)
    bench.emit_sweep_svg(rows, out / "sweep.svg", bench.primary_metric(spec))
    if lengths:
        rows += bench.timing_rows(params, ar, vocab_for(spec), lengths, max(sweep), config=dcfg,
                                  seed=seed)
    bench.emit_sweep_csv(rows, out / "sweep.csv")
    if args.traces:
        trace_rows, _ = parse_csv(args.traces)
        by: dict[int, list] = {}
        for r in trace_rows:
            by.setdefault(int(r.get("trace", 0)), []).append((int(r["position"]), int(r["unmask_step"])))
        traces = [DecodeTrace(np.array([s for _, s in sorted(v)]), [], 0, 0.0) for _, v in sorted(by.items())]
        stats = bench.wavefront_stats(traces)
        bench.emit_wavefront_csv(stats, out / "wavefront.csv")
        print(f"wavefront: mean Spearman rho {stats.mean:.4f} over {len(stats.rhos)} traces "
              f"({stats.skipped} skipped)")
    write_resolved(cp, out, "bench", seed, {"bench": {"sweep": ",".join(map(str, sweep)), "n_eval": n_eval,
                                                      "lengths": ",".join(map(str, lengths))},
                                            "decode": asdict(dcfg)})
    for r in rows:
        print(f"{r.decoder:12s} T={r.steps:4d} N={r.target_len:4d} acc={r.token_accuracy:.4f} "
              f"nll={r.nll:.4f} passes={r.forward_pass_count} wall={r.wall_time * 1e3:.2f}ms")
    return 0


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"maskdiff {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides MDTC_OUT and [run] out_dir)")
        return p

    p = common(sub.add_parser("gen-data", help="sample a dataset from the configured process"))
    p.add_argument("--count", type=int)
    p.add_argument("--prompt-len", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="AR pretraining or one diffusion arm"))
    p.add_argument("--arm", required=True, choices=ARMS)
    p.add_argument("--steps", type=int, help="optimizer steps (added to the resumed step)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ar-checkpoint", help="AR weights for the ar_init arms (default: pretrain now)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("decode", help="generate a target by iterative unmasking"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", help="text symbols, comma separated")
    p.add_argument("--prompt", help="prompt symbols, comma separated")
    p.add_argument("--target-len", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = common(sub.add_parser("verify-theory", help="check the forward-dependence bound exactly"))
    p.add_argument("--tau", help="masking rates, comma separated")
    p.add_argument("--max-subsets", type=int, help="sample this many past subsets (lower bound on eps)")
    p.set_defaults(func=cmd_verify_theory)

    p = common(sub.add_parser("edit", help="edit a target by selective masking"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True, help="JSON with text, prompt and target (decode output)")
    p.add_argument("--request", required=True, help="edit request JSON text or file")
    p.add_argument("--head", help="layer,head for alignment (default: best on validation)")
    p.add_argument("--n-validation", type=int, default=32)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_edit)

    p = common(sub.add_parser("bench", help="speed/quality sweep and wavefront statistics"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ar-checkpoint", help="causal model for the AR baselines")
    p.add_argument("--sweep", help="denoising step counts, comma separated")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--lengths", help="target lengths for the timing comparison")
    p.add_argument("--traces", help="decode_trace.csv for wavefront statistics")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidArgument as exc:
        print(f"maskdiff {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except ResourceLimit as exc:
        print(f"maskdiff {args.command}: resource limit: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"maskdiff {args.command}: numeric error: {exc}", file=sys.stderr)
        return 4
    except MaskDiffError as exc:
        print(f"maskdiff {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"maskdiff {args.command}: io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
