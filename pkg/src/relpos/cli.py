"""Command-line entry point: ``relpos {corpus,train,eval}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .corpus import ConfigurationError, build_vocab, write_synthetic_corpus
from .evaluation import (
    DEFAULT_RATES,
    cost_report,
    label_density,
    majority_baseline,
    make_probe,
    probe_finetune,
)
from .model import ModelConfig, TransformerModel
from .objectives import VARIANTS
from .trainer import TrainConfig, Trainer, evaluate, load_config, prepare_data, run


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text)
    print(text)


def cmd_corpus(args) -> int:
    if not args.synthetic:
        if not args.input:
            raise ConfigurationError("give --synthetic or one or more --input files")
        vocab = build_vocab(args.input, args.max_vocab, args.min_freq)
    else:
        path = write_synthetic_corpus(args.out, args.vocab_size, args.num_tokens, args.seed)
        print(f"wrote {args.num_tokens} tokens to {path}")
        vocab = build_vocab([path], args.max_vocab, args.min_freq) if args.vocab_out else None
    if args.vocab_out and vocab is not None:
        vocab.save(args.vocab_out)
        print(f"wrote vocabulary of {len(vocab)} entries to {args.vocab_out}")
    return 0


def _train_config(args) -> TrainConfig:
    base = TrainConfig.paper() if args.preset == "paper" else TrainConfig.desk()
    if args.config:
        base = load_config(args.config)
    overrides = {}
    if args.objective is not None:
        overrides["objective"] = args.objective
    if args.corruption_rate is not None:
        overrides["corruption_rate"] = args.corruption_rate
    elif args.objective == "mlm" and not args.config:
        overrides["corruption_rate"] = DEFAULT_RATES["mlm"]
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.corpus:
        overrides["corpus_paths"] = list(args.corpus)
    if args.readout is not None:
        overrides["readout"] = args.readout
    if args.deterministic:
        overrides["deterministic"] = True
    return dataclasses.replace(base, **overrides)


def cmd_train(args) -> int:
    config = _train_config(args)
    config.validate()
    summary = run(config, resume_from=args.resume)
    print(json.dumps(summary, indent=2))
    return 0


def _model_config(preset: str) -> ModelConfig:
    return ModelConfig.paper() if preset == "paper" else ModelConfig.desk()


def cmd_eval(args) -> int:
    if args.metric == "density":
        k = args.seq_len or _model_config(args.preset).max_positions
        rates = {v: (args.rate if args.rate is not None else DEFAULT_RATES[v]) for v in VARIANTS}
        _emit({
            "seq_len": k,
            "labels_per_sequence": {v: label_density(k, v, rates[v]) for v in VARIANTS},
            "rates": rates,
        }, args.out)
        return 0
    if args.metric == "flops":
        cfg = _model_config(args.preset)
        _emit(cost_report(cfg, args.seq_len or cfg.max_positions, args.batch_size), args.out)
        return 0
    if not args.checkpoint:
        raise ConfigurationError(f"--metric {args.metric} needs --checkpoint")
    trainer = Trainer.from_checkpoint(args.checkpoint)
    cfg = trainer.config
    if args.metric == "relpos":
        _, _, eval_seqs = prepare_data(cfg)
        _emit({"objective": cfg.objective, "step": trainer.step, **evaluate(trainer, eval_seqs)}, args.out)
        return 0
    probe = make_probe("order", args.probe_classes, cfg.seq_len, cfg.model.vocab_size,
                       args.probe_train, args.probe_test, seed=args.probe_seed)
    report = {
        "probe": "order",
        "classes": args.probe_classes,
        "pretrained_accuracy": probe_finetune(trainer.model, probe, args.epochs, seed=args.probe_seed),
        "majority_baseline": majority_baseline(probe),
    }
    if args.compare_random:
        fresh = TransformerModel(cfg.model, seed=args.probe_seed + 1000)
        report["random_init_accuracy"] = probe_finetune(fresh, probe, args.epochs, seed=args.probe_seed)
    _emit(report, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relpos", description="Relative-position pretraining at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="generate a synthetic corpus and/or build a vocabulary")
    c.add_argument("--synthetic", action="store_true")
    c.add_argument("--vocab-size", type=int, default=1000, help="word types in the synthetic corpus")
    c.add_argument("--num-tokens", type=int, default=400_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="synthetic.txt")
    c.add_argument("--input", nargs="*", default=[])
    c.add_argument("--vocab-out")
    c.add_argument("--max-vocab", type=int, default=8192)
    c.add_argument("--min-freq", type=int, default=1)
    c.set_defaults(func=cmd_corpus)

    t = sub.add_parser("train", help="pretrain with one objective")
    t.add_argument("--config", help="JSON file mirroring TrainConfig fields")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--objective", choices=VARIANTS)
    t.add_argument("--corruption-rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--corpus", nargs="*")
    t.add_argument("--readout", choices=("linear", "mlp"))
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--deterministic", action="store_true", help="write 0 in the timing column")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or print closed-form reports")
    e.add_argument("--checkpoint")
    e.add_argument("--metric", choices=("relpos", "density", "flops", "probe"), required=True)
    e.add_argument("--preset", choices=("desk", "paper"), default="paper")
    e.add_argument("--seq-len", type=int)
    e.add_argument("--rate", type=float)
    e.add_argument("--batch-size", type=int, default=1)
    e.add_argument("--epochs", type=int, default=8)
    e.add_argument("--probe-classes", type=int, default=3)
    e.add_argument("--probe-train", type=int, default=2000)
    e.add_argument("--probe-test", type=int, default=600)
    e.add_argument("--probe-seed", type=int, default=0)
    e.add_argument("--compare-random", action="store_true")
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
