"""Command-line driver.

Exit codes: 0 success, 2 usage error, 3 data or model error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from .copy_task import CopyTaskError, make_copy_instances
from .descale import IDENTITY, PolicyError, ablate_c, parse_policy, step_scales
from .harness import (
    AblationSetup,
    HarnessError,
    SweepSpec,
    ablation_csv,
    emit_report,
    frequency_buckets,
    held_out_ce,
    load_summary,
    run_repetition_sweep,
)
from .numerics import NumericsError, derive_stream
from .patching import (
    InductionHeadSet,
    PatchingError,
    head_behavior_scores,
    identify_induction_heads,
    repeated_random_sequences,
    run_patch_protocol,
)
from .toxicity import ToxicityConfig, ToxicityError, check_propagation, run_trace
from .transformer import HeadId, ModelConfig, ModelError
from .zoo import (
    CheckpointError,
    TrainingDiverged,
    TrainSpec,
    load_checkpoint,
    save_checkpoint,
    train_toy_model,
    wire_induction_model,
    wired_config,
)
from .zoo.checkpoint import weights_digest
from .zoo.training import corpus

log = logging.getLogger("repcurse")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3

DEFAULTS: dict = {
    "wire": {"vocab_size": 32, "max_seq": 32, "n_heads": 4, "sharpness": 20.0, "logit_gain": 10.0},
    "model": {"n_layers": 2, "n_heads": 4, "d_model": 64, "d_head": 16, "vocab_size": 256, "max_seq": 64},
    # mirrors configs/toy_train.json
    "train": TrainSpec(seq_len=64, batch_size=32, steps=8000, lr=1e-2, warmup_steps=100).to_dict(),
    "detect": {"n_instances": 100, "filler_len": 16, "p": 2.0},
    "headscores": {"half_len": 16, "count": 32},
    "heads": None,
    "toxicity": {"pattern": None, "pattern_len": 2, "copies": 8, "steps": 32, "method": "causal", "gamma": 0.65},
    "sweep": {
        **{k: v for k, v in SweepSpec().to_dict().items() if k not in ("master_seed", "ind_heads")},
        "bucket": None,
    },
    "ablate": {"c_values": [0.5, 1.0, 2.0, 4.0, 10.0], "k_values": [64], "trials": 10},
    "eval": {"n_sequences": 64, "seq_len": None, "prompt_len": None},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown config section or key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("sweep",):
            out[k] = _merge(out[k], v)
        elif isinstance(out[k], dict) and isinstance(v, dict):
            extra = set(v) - set(out[k])
            if extra:
                raise UsageError(f"unknown {k} keys: {sorted(extra)}")
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise UsageError("config root must be an object")
        cfg = _merge(cfg, user)
    return cfg


def _out(args) -> Path:
    p = Path(args.out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {p}: {e}") from e
    return p


def _model(args):
    if not args.model:
        raise UsageError("--model <checkpoint> is required for this command")
    weights, prov = load_checkpoint(args.model)
    return weights, prov


def _policy(args):
    return parse_policy(args.policy) if args.policy else IDENTITY


def _heads(args, cfg) -> tuple[HeadId, ...]:
    if getattr(args, "heads", None):
        try:
            return InductionHeadSet.from_json(Path(args.heads).read_text()).heads
        except (OSError, ValueError, TypeError) as e:
            raise DataError(f"cannot read head set {args.heads}: {e}") from e
    if cfg["heads"]:
        return tuple(HeadId(int(l), int(h)) for l, h in cfg["heads"])
    raise UsageError("no induction heads given; pass --heads <induction_heads.json> or set \"heads\" in the config")


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    print(path)


# --- subcommands ---------------------------------------------------------------


def cmd_wire(args, cfg):
    w = cfg["wire"]
    mcfg = wired_config(w["vocab_size"], w["max_seq"], w["n_heads"])
    weights = wire_induction_model(mcfg, w["sharpness"], w["logit_gain"])
    path = save_checkpoint(weights, _out(args) / "model.json", {"kind": "wired"})
    print(path)


def cmd_train(args, cfg):
    mcfg = ModelConfig(**cfg["model"])
    spec = TrainSpec.from_dict({**cfg["train"], "seed": args.seed if args.seed is not None else cfg["train"]["seed"]})
    weights, trace = train_toy_model(mcfg, spec, log_every=200)
    out = _out(args)
    save_checkpoint(weights, out / "model.json", {"kind": "trained", "seed": spec.seed, "train_steps": spec.steps})
    print(out / "model.json")
    _write(out / "train_loss.csv", "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(trace)))


def cmd_detect(args, cfg):
    weights, _ = _model(args)
    d = cfg["detect"]
    seed = args.seed or 0
    inst = make_copy_instances(d["n_instances"], weights.cfg.vocab_size, derive_stream(seed, "copy-instances"), L=d["filler_len"])
    imap = run_patch_protocol(weights, inst, seed=seed)
    heads = identify_induction_heads(imap, d["p"])
    out = _out(args)
    _write(out / "importance.csv", imap.to_csv())
    _write(out / "induction_heads.json", heads.to_json() + "\n")
    if args.dump_trials:
        _write(out / "trials.jsonl", "".join(i.to_json() + "\n" for i in inst))


def cmd_headscores(args, cfg):
    weights, _ = _model(args)
    h = cfg["headscores"]
    seqs = repeated_random_sequences(weights.cfg.vocab_size, h["half_len"], h["count"], args.seed or 0)
    _write(_out(args) / "head_scores.csv", head_behavior_scores(weights, seqs).to_csv())


def cmd_toxicity(args, cfg):
    weights, _ = _model(args)
    heads = _heads(args, cfg)
    t = cfg["toxicity"]
    pattern = t["pattern"]
    if pattern is None:
        pattern = derive_stream(args.seed or 0, "toxicity-pattern").sample(range(weights.cfg.vocab_size), t["pattern_len"])
    context = list(pattern) * t["copies"]
    tcfg = ToxicityConfig(heads, gamma=t["gamma"], method=t["method"], seed=args.seed or 0)
    trace = run_trace(weights, context, t["steps"], tcfg, step_scale=step_scales(_policy(args), heads))
    _write(_out(args) / "trace.csv", trace.to_csv())
    stats = check_propagation(trace, t["gamma"]) if len(trace.tau) >= 2 else None
    if stats is not None:
        print(json.dumps({"onset": stats.onset, "windowed_monotone": stats.windowed_monotone, "ood": trace.ood}))


def _sweep_spec(args, cfg, heads) -> SweepSpec:
    s = dict(cfg["sweep"])
    bucket = s.pop("bucket")
    if args.policy:
        s["policies"] = [args.policy]
    s["master_seed"] = args.seed or 0
    s["ind_heads"] = [list(h) for h in heads]
    if bucket is not None:
        s["token_pool"] = bucket_pool(args, bucket)
    return SweepSpec.from_dict(s)


def bucket_pool(args, bucket: dict) -> list[int]:
    """Tokens of a frequency bucket over the model's training corpus."""
    weights, prov = _model(args)
    side, pct = bucket.get("side"), float(bucket.get("pct", 1.0))
    if side not in ("top", "bottom"):
        raise UsageError("bucket side must be 'top' or 'bottom'")
    seed = prov.get("seed") or 0
    n_seq = int(bucket.get("corpus_sequences", 512))
    spec = TrainSpec(seq_len=weights.cfg.max_seq, seed=seed)
    fb = frequency_buckets(corpus(seed, "train-data", n_seq, weights.cfg.vocab_size, spec), pct, pct, weights.cfg.vocab_size)
    return fb.top_set if side == "top" else fb.bottom_set


def cmd_sweep(args, cfg):
    weights, _ = _model(args)
    heads = _heads(args, cfg) if (args.heads or cfg["heads"]) else ()
    spec = _sweep_spec(args, cfg, heads)
    report = run_repetition_sweep(weights, spec, model_path=str(args.model))
    for p in emit_report(report, _out(args)).values():
        print(p)


def cmd_report(args, cfg):
    if not args.source:
        raise UsageError("report needs --from <summary.json>")
    summary = load_summary(args.source)
    try:
        spec = SweepSpec.from_dict(summary["config"])
        model_path = summary["model"]["path"]
        expected = summary["model"]["sha256"]
    except (KeyError, TypeError) as e:
        raise DataError(f"summary {args.source} lacks {e}") from e
    weights, _ = load_checkpoint(args.model or model_path)
    if weights_digest(weights) != expected:
        raise DataError("model digest differs from the one recorded in the summary")
    report = run_repetition_sweep(weights, spec, model_path=model_path)
    for p in emit_report(report, _out(args)).values():
        print(p)


def cmd_ablate(args, cfg):
    weights, _ = _model(args)
    heads = _heads(args, cfg)
    a = cfg["ablate"]
    sweep = _sweep_spec(args, {**cfg, "sweep": {**cfg["sweep"], "k_values": a["k_values"], "trials": a["trials"]}}, heads)
    setup = AblationSetup(sweep, eval_set(weights, cfg, args.seed or 0), cfg["eval"]["prompt_len"])
    rows = ablate_c(weights, a["c_values"], setup)
    _write(_out(args) / "ablation.csv", ablation_csv(rows))


def eval_set(weights, cfg, seed: int):
    e = cfg["eval"]
    T = e["seq_len"] or weights.cfg.max_seq
    spec = TrainSpec(**{**cfg["train"], "seq_len": T, "seed": seed})
    # a different stream label from training keeps the held-out set disjoint
    return corpus(seed, "held-out", e["n_sequences"], weights.cfg.vocab_size, spec)


def cmd_eval(args, cfg):
    weights, _ = _model(args)
    policy = _policy(args)
    heads = _heads(args, cfg) if policy.kind != "identity" else ()
    res = held_out_ce(weights, policy, eval_set(weights, cfg, args.seed or 0), heads, cfg["eval"]["prompt_len"])
    res = {"policy": str(policy), **res}
    text = json.dumps(res, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    _write(_out(args) / "eval.json", text)


COMMANDS = {
    "wire": (cmd_wire, "write the hand-wired induction model"),
    "train": (cmd_train, "train the toy attention-only model"),
    "detect": (cmd_detect, "activation patching on copy-task instances"),
    "headscores": (cmd_headscores, "prefix-matching and copy-boost scores per head"),
    "toxicity": (cmd_toxicity, "per-step toxicity and entropy trace on a repetition context"),
    "sweep": (cmd_sweep, "repetition sweep and report"),
    "ablate-c": (cmd_ablate, "repetition control and held-out CE across log-policy c values"),
    "eval": (cmd_eval, "held-out cross-entropy under a policy"),
    "report": (cmd_report, "re-run a sweep from its summary.json"),
}


def _global_flags(p: argparse.ArgumentParser, default):
    p.add_argument("--seed", type=int, default=default(None), help="master seed (default 0)")
    p.add_argument("--config", default=default(None), help="JSON config file, see --print-config")
    p.add_argument("--model", default=default(None), help="checkpoint path")
    p.add_argument("--out", default=default("out"), help="output directory (default ./out)")
    p.add_argument("--policy", default=default(None), help="log:c=<f>[,clamp=0|1] | lin | const:k=<f> | id")
    p.add_argument("--heads", default=default(None), help="induction_heads.json from 'detect'")
    p.add_argument("--print-config", action="store_true", default=default(False), help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repcurse", description=__doc__.splitlines()[0])
    _global_flags(parser, lambda v: v)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        # global flags are also accepted after the subcommand
        _global_flags(sp, lambda v: argparse.SUPPRESS)
        if name == "detect":
            sp.add_argument("--dump-trials", action="store_true", help="also write the copy-task instances to trials.jsonl")
        if name == "report":
            sp.add_argument("--from", dest="source", help="summary.json of an earlier sweep")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.policy:
            parse_policy(args.policy)
        COMMANDS[args.command][0](args, cfg)
    except (UsageError, PolicyError) as e:
        print(f"repcurse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DataError,
        CheckpointError,
        ModelError,
        HarnessError,
        PatchingError,
        ToxicityError,
        CopyTaskError,
        NumericsError,
        TrainingDiverged,
        ValueError,
        OSError,
    ) as e:
        print(f"repcurse: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
