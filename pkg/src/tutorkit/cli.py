"""Command-line entry point: synth / train / eval / generate / stats.

Every run is reproducible from its echoed configuration plus the seed. A JSON
config file (--config) supplies defaults; explicit flags override it. Exit
codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .corpus import (
    IMBALANCE_PROFILES,
    StrategyList,
    Turn,
    Conversation,
    corpus_stats,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .estimator import ConversationalTutor
from .evaluation import EvalSetting, evaluate, pipeline_generate
from .model import assemble_source
from .corpus import make_batches

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


# Flags that participate in config-file merging, with their defaults.
CONFIG_DEFAULTS = {
    "d_model": 64,
    "n_heads": 4,
    "d_ff": 128,
    "n_enc_layers": 2,
    "n_dec_layers": 2,
    "dropout_p": 0.0,
    "max_positions": 256,
    "share_decoders": False,
    "min_freq": 1,
    "lr_peak": 1e-3,
    "warmup_steps": 100,
    "total_steps": 2000,
    "end_lr": 0.0,
    "decay_degree": 1.0,
    "l2_coeff": 0.01,
    "l2_mode": "decoupled",
    "update_freq": 4,
    "max_tokens": 1024,
    "patience": 3,
    "lambda_sd": 1.0,
    "gamma": 1.0,
    "delta": 0.2,
    "distill_direction": "as_written",
    "detach_teacher": True,
    "early_stop_metric": "val_loss",
    "theta": 0.3,
    "beam": 5,
    "max_gen_len": 32,
    "seed": 0,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    for key, default in CONFIG_DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, type=type(default), default=None)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def merge_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc.msg}")
        unknown = set(file_values) - set(CONFIG_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(file_values)
    for key in CONFIG_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _require_file(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conversations, strategies = generate_synthetic(
        n=args.n,
        n_strategies=args.strategies,
        seed=args.seed,
        cue_noise=args.cue_noise,
        imbalance=args.imbalance,
    )
    train_c, valid_c, test_c = split_corpus(conversations, seed=args.seed)
    strategies.save(out / "strategies.txt")
    save_corpus(out / "train.jsonl", train_c, strategies)
    save_corpus(out / "valid.jsonl", valid_c, strategies)
    save_corpus(out / "test.jsonl", test_c, strategies)
    print(
        f"wrote {len(train_c)}/{len(valid_c)}/{len(test_c)} conversations "
        f"(train/valid/test) to {out}"
    )
    return 0


def cmd_train(args) -> int:
    config = merge_config(args)
    corpus_dir = Path(args.corpus)
    strategies = StrategyList.load(_require_file(corpus_dir / "strategies.txt", "strategy list"))
    train_convs = load_corpus(_require_file(corpus_dir / "train.jsonl", "training corpus"), strategies)
    valid_convs = load_corpus(_require_file(corpus_dir / "valid.jsonl", "validation corpus"), strategies)
    if args.ablate_distill:
        config["lambda_sd"] = 0.0

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")

    estimator = ConversationalTutor(**config)
    estimator.fit(train_convs, strategy_names=strategies, validation=valid_convs)

    with (run_dir / "train.log").open("w", encoding="utf-8") as fh:
        for record in estimator.train_log_:
            fh.write(json.dumps(record) + "\n")
    estimator.save(run_dir / "best.ckpt")
    best = estimator.best_score_
    print(f"run directory: {run_dir}")
    print(f"best validation score: {best:.6f}" if best is not None else "no validation run")
    return 0


def _load_eval_inputs(args):
    ckpt = _require_file(Path(args.ckpt), "checkpoint")
    estimator = ConversationalTutor.load(ckpt)
    corpus_dir = Path(args.corpus)
    strategies = StrategyList.load(_require_file(corpus_dir / "strategies.txt", "strategy list"))
    if tuple(strategies.names) != tuple(estimator.strategies_.names):
        raise UsageError(
            "checkpoint/corpus mismatch: strategy lists differ "
            f"({list(estimator.strategies_.names)} vs {list(strategies.names)})"
        )
    test = load_corpus(_require_file(corpus_dir / Path(args.split), "evaluation corpus"), strategies)
    return estimator, test


def cmd_eval(args) -> int:
    estimator, test_convs = _load_eval_inputs(args)
    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = (
        [s for s in EvalSetting]
        if args.setting == "all"
        else [EvalSetting(args.setting)]
    )
    theta = args.theta if args.theta is not None else estimator.theta
    beam = args.beam if args.beam is not None else estimator.beam
    batches = make_batches(
        test_convs,
        estimator.vocab_,
        max_tokens=estimator.max_tokens,
        max_positions=estimator.max_positions,
    )
    for setting in settings:
        report = evaluate(
            estimator.model_,
            batches,
            setting,
            theta=theta,
            beam=beam,
            max_len=estimator.max_gen_len,
            predict_from=args.predict_from,
        )
        stem = f"eval.{setting.value}"
        (out_dir / f"{stem}.report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out_dir / f"{stem}.report.txt").write_text(report.format_table() + "\n", encoding="utf-8")
        with (out_dir / f"{stem}.examples.jsonl").open("w", encoding="utf-8") as fh:
            for ex in report.examples:
                fh.write(json.dumps(ex) + "\n")
        print(report.format_table())
        print()
    return 0


def _parse_context(args, strategies: StrategyList) -> Conversation:
    if args.context_file:
        path = _require_file(Path(args.context_file), "context file")
        record = json.loads(path.read_text(encoding="utf-8").strip().splitlines()[0])
        turns = [Turn(t["speaker"], t["text"]) for t in record["turns"]]
        gold = [strategies.index(n) for n in record.get("strategies", [])]
        return Conversation(id=record.get("id", "cli"), turns=turns, strategies=gold,
                            target=record.get("target", "dummy"))
    if not args.context:
        raise UsageError("provide --context or --context-file")
    turns = []
    for i, part in enumerate(args.context.split("|")):
        part = part.strip()
        if not part:
            continue
        speaker = "student" if (len(args.context.split("|")) - 1 - i) % 2 == 0 else "tutor"
        for prefix in ("tutor:", "student:"):
            if part.lower().startswith(prefix):
                speaker = prefix[:-1]
                part = part[len(prefix):].strip()
                break
        turns.append(Turn(speaker, part))
    if not turns:
        raise UsageError("the context is empty")
    return Conversation(id="cli", turns=turns, strategies=[], target="dummy")


def cmd_generate(args) -> int:
    ckpt = _require_file(Path(args.ckpt), "checkpoint")
    estimator = ConversationalTutor.load(ckpt)
    conv = _parse_context(args, estimator.strategies_)
    theta = args.theta if args.theta is not None else estimator.theta
    beam = args.beam if args.beam is not None else estimator.beam
    forced = None
    if args.force_strategy:
        forced = estimator.strategies_.index(args.force_strategy)
    src = assemble_source(conv, estimator.vocab_, estimator.max_positions)
    setting = EvalSetting.NEED_TS_PREDICT
    result = pipeline_generate(
        estimator.model_,
        src,
        setting,
        theta=theta,
        beam=beam,
        max_len=estimator.max_gen_len,
        forced_strategy=forced,
    )
    names = estimator.strategies_.names
    used = ", ".join(f"{names[j]} ({w:.3f})" for j, w in result.strategies) or "(none)"
    print(f"strategies: {used}")
    print(f"response: {result.text}")
    return 0


def cmd_stats(args) -> int:
    corpus_path = _require_file(Path(args.corpus_file), "corpus file")
    strategies = StrategyList.load(_require_file(Path(args.strategies_file), "strategy list"))
    conversations = load_corpus(corpus_path, strategies)
    stats = corpus_stats(conversations, strategies)
    if args.json:
        print(json.dumps(stats, indent=2))
    else:
        print(f"conversations: {stats['n_conversations']}")
        print(f"strategies: {stats['n_strategies']}")
        print(f"majority class: {stats['majority_class']} (share {stats['majority_share']:.3f})")
        for name, count in stats["strategy_counts"].items():
            share = stats["strategy_shares"][name]
            print(f"  {name:<16}{count:>7}  {share:.3f}")
        print(f"context tokens: {stats['context_tokens']}  target tokens: {stats['target_tokens']}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tutorkit",
        description="Train and run a joint teaching-strategy / tutor-response model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic tutoring corpus")
    p_synth.add_argument("--out", required=True, type=Path, help="output directory")
    p_synth.add_argument("--n", type=int, default=2000)
    p_synth.add_argument("--strategies", type=int, default=5)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--cue-noise", type=float, default=0.0)
    p_synth.add_argument("--imbalance", choices=IMBALANCE_PROFILES, default="uniform")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a corpus directory")
    p_train.add_argument("--corpus", required=True, type=Path,
                         help="directory with train.jsonl, valid.jsonl, strategies.txt")
    p_train.add_argument("--run-dir", required=True, type=Path)
    p_train.add_argument("--ablate-distill", action="store_true",
                         help="set the distillation weight to zero")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a test corpus")
    p_eval.add_argument("--ckpt", required=True, type=Path)
    p_eval.add_argument("--corpus", required=True, type=Path,
                        help="directory with strategies.txt and the evaluation split")
    p_eval.add_argument("--split", default="test.jsonl", help="corpus file inside --corpus")
    p_eval.add_argument("--setting", default="all",
                        choices=["all"] + [s.value for s in EvalSetting])
    p_eval.add_argument("--predict-from", default="source", choices=["source", "target"])
    p_eval.add_argument("--theta", type=float, default=None)
    p_eval.add_argument("--beam", type=int, default=None)
    p_eval.add_argument("--out", type=Path, default=None, help="report directory (default: checkpoint dir)")
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("generate", help="generate a response for a context")
    p_gen.add_argument("--ckpt", required=True, type=Path)
    p_gen.add_argument("--context", help="turns separated by '|', optional 'tutor:'/'student:' prefixes")
    p_gen.add_argument("--context-file", type=Path, help="JSONL record with a turns field")
    p_gen.add_argument("--force-strategy", help="strategy name to force as the prompt")
    p_gen.add_argument("--theta", type=float, default=None)
    p_gen.add_argument("--beam", type=int, default=None)
    p_gen.set_defaults(func=cmd_generate)

    p_stats = sub.add_parser("stats", help="summarize a corpus file")
    p_stats.add_argument("corpus_file", type=Path)
    p_stats.add_argument("strategies_file", type=Path)
    p_stats.add_argument("--json", action="store_true")
    p_stats.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
