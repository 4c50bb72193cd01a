"""Command-line interface: train, generate, evaluate, gradcheck, report.

Every subcommand accepts ``--config FILE`` (JSON with optional "train",
"model", "decode", and "eval" sections mirroring the config dataclasses);
command-line flags override config values.  The default output directory
comes from the CTLM_OUT_DIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .corpus import Vocabulary, build_vocab, corpus_from_single_text, corpus_from_texts
from .decoding import DecodeConfig, decode
from .exceptions import ConfigError, CtlmError
from .gradients import gradcheck_report
from .harness import (
    EvalConfig,
    TrainConfig,
    comparison_table,
    default_out_dir,
    evaluate,
    reference_report,
    train,
    write_json,
)
from .model import ModelConfig, load_checkpoint
from .version import __version__


def _read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(_read_text(path))
    if not isinstance(cfg, dict):
        raise ConfigError("config file must contain a JSON object")
    return cfg


def _build(cls, section: dict, overrides: dict):
    """Dataclass from config-section values with non-None flag overrides."""
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    data = dict(section)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**data)


def _add_decode_flags(p: argparse.ArgumentParser):
    p.add_argument("--decode", choices=("greedy", "beam", "topk", "nucleus"))
    p.add_argument("--beam-size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--ngram-ban", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--gen-len", type=int)
    p.add_argument("--seed", type=int)


def _decode_config(args, cfg_file: dict) -> DecodeConfig:
    return _build(
        DecodeConfig,
        cfg_file.get("decode", {}),
        {
            "strategy": args.decode,
            "beam_size": args.beam_size,
            "k": args.k,
            "top_p": args.top_p,
            "ngram_ban": args.ngram_ban,
            "min_new_tokens": args.min_len,
            "max_new_tokens": args.gen_len,
            "seed": args.seed,
        },
    ).validate()


def _add_corpus_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", help="single text file, split 90/5/5 by trunk count")
    p.add_argument("--train-file")
    p.add_argument("--valid-file")
    p.add_argument("--test-file")
    p.add_argument("--mode", choices=("char", "word"))
    p.add_argument("--trunk", type=int, dest="trunk_length")


def _load_corpus(args, vocab, trunk_length):
    if args.data:
        return corpus_from_single_text(vocab, _read_text(args.data), trunk_length)
    if not (args.train_file and args.valid_file and args.test_file):
        raise ConfigError("provide --data or all of --train-file/--valid-file/--test-file")
    return corpus_from_texts(
        vocab,
        _read_text(args.train_file),
        _read_text(args.valid_file),
        _read_text(args.test_file),
        trunk_length,
    )


def _cmd_train(args):
    cfg_file = _load_config_file(args.config)
    train_cfg = _build(
        TrainConfig,
        cfg_file.get("train", {}),
        {
            "objective": args.objective,
            "total_steps": args.steps,
            "warmup_steps": args.warmup_steps,
            "eval_interval": args.eval_interval,
            "ul_s_switch_step": args.ul_switch_step,
            "trunk_length": args.trunk_length,
            "batch_size": args.batch,
            "seed": args.seed,
            "learning_rate": args.lr,
            "clip_norm": args.clip_norm,
            "negative_window": args.m,
            "ct_crop_length": args.ct_crop,
            "ul_ts_reduced_lr": args.ul_reduced_lr,
        },
    )
    mode = args.mode or cfg_file.get("corpus", {}).get("mode", "word")

    if args.data:
        full_text = _read_text(args.data)
        vocab_source = full_text
    else:
        if not args.train_file:
            raise ConfigError("provide --data or --train-file/--valid-file/--test-file")
        vocab_source = _read_text(args.train_file)
    vocab = build_vocab(vocab_source, mode=mode, max_size=args.vocab_size)
    corpus = _load_corpus(args, vocab, train_cfg.trunk_length)

    model_cfg = _build(
        ModelConfig,
        cfg_file.get("model", {}),
        {
            "vocab_size": vocab.size,
            "d_model": args.d_model,
            "n_layers": args.layers,
            "n_heads": args.heads,
            "d_ff": args.d_ff,
            "max_positions": args.max_positions,
            "dropout": args.dropout,
            "seed": args.seed if args.seed is not None else None,
        },
    )
    out_dir = Path(args.out or default_out_dir()) / train_cfg.objective
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.txt")
    manifest = train(train_cfg, model_cfg, corpus, out_dir)
    print(json.dumps({k: manifest[k] for k in ("selected_step", "selected_validation_ce")}))
    print(f"run artefacts in {out_dir}")
    return 0


def _cmd_generate(args):
    cfg_file = _load_config_file(args.config)
    decode_cfg = _decode_config(args, cfg_file)
    state = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab, mode=args.mode or "word")
    rng = np.random.default_rng(decode_cfg.seed)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.prefixes, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                prefix_ids = vocab.encode(line)
                result = decode(state, prefix_ids, decode_cfg, rng)
                out.write(
                    json.dumps(
                        {
                            "prefix": line,
                            "continuation": vocab.decode(result.ids),
                            "per_step_logprob": result.logprobs,
                        }
                    )
                    + "\n"
                )
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_evaluate(args):
    cfg_file = _load_config_file(args.config)
    decode_cfg = _decode_config(args, cfg_file)
    eval_cfg = _build(
        EvalConfig,
        cfg_file.get("eval", {}),
        {
            "prefix_len": args.prefix_len,
            "cont_len": args.gen_len,
            "max_instances": args.max_instances,
            "heatmap_instances": args.heatmap_instances,
        },
    )
    decode_cfg.max_new_tokens = eval_cfg.cont_len
    state = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab, mode=args.mode or "word")
    trunk = args.trunk_length or state.config.max_positions // 2
    corpus = _load_corpus(args, vocab, trunk)

    if args.reference:
        report = reference_report(corpus, eval_cfg)
    else:
        report = evaluate(state, corpus, decode_cfg, eval_cfg)

    heat = report.pop("heatmap_mean", None)
    if args.out:
        write_json(args.out, report)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    if args.heatmap_csv and heat is not None:
        _write_matrix_csv(args.heatmap_csv, heat)
    if args.histogram_csv:
        rows = [report["histogram_rep_1"], report["histogram_rep_4"]]
        _write_matrix_csv(args.histogram_csv, rows)
    return 0


def _write_matrix_csv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(",".join("" if v is None else repr(v) for v in row) + "\n")


def _cmd_gradcheck(args):
    kinds = ("ce", "ul", "ct", "nce") if args.loss == "all" else (args.loss,)
    reports = [gradcheck_report(k, trials=args.trials, seed=args.seed) for k in kinds]
    payload = reports[0] if len(reports) == 1 else reports
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    print()
    worst = max(r["max_rel_err"] for r in reports)
    bad = sum(r["sign_violations"] for r in reports)
    return 0 if worst <= args.tolerance and bad == 0 else 1


def _cmd_report(args):
    names = args.names.split(",") if args.names else None
    if names and len(names) != len(args.reports):
        raise ConfigError("--names must list one name per report")
    named = []
    for i, path in enumerate(args.reports):
        with open(path, "r", encoding="utf-8") as f:
            named.append((names[i] if names else Path(path).stem, json.load(f)))
    text, csv_text = comparison_table(named)
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctlm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model under one objective")
    p.add_argument("--config")
    _add_corpus_flags(p)
    p.add_argument("--objective", choices=("ce", "ce+ct", "ce+nce", "ul-t", "ul-ts"))
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--ul-switch-step", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--m", type=int, help="negative window size")
    p.add_argument("--ct-crop", type=int, help="positions per trunk used by the aux term")
    p.add_argument("--ul-reduced-lr", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--d-model", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--max-positions", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="decode continuations for text prefixes")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--mode", choices=("char", "word"))
    p.add_argument("--prefixes", required=True, help="text file, one prefix per line")
    p.add_argument("--out")
    _add_decode_flags(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="full metrics report for a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    _add_corpus_flags(p)
    _add_decode_flags(p)
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--max-instances", type=int)
    p.add_argument("--heatmap-instances", type=int)
    p.add_argument("--reference", action="store_true",
                   help="score the human continuations instead of decoding")
    p.add_argument("--out", help="write the report JSON here (default stdout)")
    p.add_argument("--heatmap-csv")
    p.add_argument("--histogram-csv")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against the oracle")
    p.add_argument("--loss", choices=("ce", "ul", "ct", "nce", "all"), default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="compare metrics reports side by side")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", help="comma-separated row names")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CtlmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
