"""Command-line entry point.

Subcommands: gen-toy, split, train, eval, param-report, cka. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import harness
from .encoder import load_checkpoint
from .peft import ParamPolicy, count_params


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nanonet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="write a synthetic separable topic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-examples", type=int, default=3000)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", type=float, default=0.55)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--keywords-per-class", type=int, default=24)
    p.add_argument("--noise-words", type=int, default=None)
    p.add_argument("--min-words", type=int, default=5)
    p.add_argument("--max-words", type=int, default=9)

    p = sub.add_parser("split", help="materialize a semi-supervised split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dev-size", type=int, required=True)
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="run co-training from a run-config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-len", type=int, default=64)

    p = sub.add_parser("param-report", help="trainable-parameter census")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bitfit", action="store_true")
    p.add_argument("--freeze-embeddings", action="store_true")
    p.add_argument("--no-train-head", action="store_true")
    p.add_argument("--csv", dest="csv_path", default=None)

    p = sub.add_parser("cka", help="teacher/student layer similarity heatmap")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--out", required=True)
    return parser


def _cmd_gen_toy(args) -> int:
    corpus = harness.gen_toy_corpus(
        n_examples=args.n_examples, n_classes=args.n_classes,
        seed=args.seed, mix=args.mix, overlap=args.overlap,
        keywords_per_class=args.keywords_per_class,
        noise_words=args.noise_words,
        min_words=args.min_words, max_words=args.max_words,
    )
    harness.save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} examples ({corpus.n_classes} classes) to {args.out}")
    return 0


def _cmd_split(args) -> int:
    corpus = harness.load_corpus(args.corpus)
    split = harness.make_split(
        corpus, per_class=args.per_class, dev_size=args.dev_size,
        test_size=args.test_size, seed=args.seed,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for part in ("labeled", "unlabeled", "dev", "test"):
        harness.save_corpus(getattr(split, part), out / f"{part}.jsonl")
    print(
        f"split sizes: labeled {len(split.labeled)}, unlabeled {len(split.unlabeled)}, "
        f"dev {len(split.dev)}, test {len(split.test)} -> {out}"
    )
    return 0


def _cmd_train(args) -> int:
    config = harness.RunConfig.from_file(args.config)
    result = harness.run_training(config, out_dir=args.out_dir)
    print(
        f"best student {result.best_student} dev accuracy {result.best_dev_acc:.4f} "
        f"at step {result.best_step}"
    )
    if result.test_acc is not None:
        print(f"test accuracy {result.test_acc:.4f}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = harness.load_corpus(args.corpus, n_classes=model.config.n_classes)
    acc = harness.evaluate(model, corpus, max_len=args.max_len)
    print(f"accuracy {acc!r} on {corpus.name} ({len(corpus)} examples)")
    return 0


def _cmd_param_report(args) -> int:
    model = load_checkpoint(args.checkpoint)
    policy = ParamPolicy(
        bitfit=args.bitfit,
        freeze_embeddings=args.freeze_embeddings,
        train_head=not args.no_train_head,
    )
    report = count_params(model, policy)
    rows = report.rows()
    print(f"{'role':<12}{'total':>12}{'trainable':>12}{'fraction':>12}")
    for role, total, trainable, fraction in rows:
        print(f"{role:<12}{total:>12}{trainable:>12}{fraction:>12.6f}")
    if args.csv_path:
        with open(args.csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["role", "total", "trainable", "fraction"])
            for role, total, trainable, fraction in rows:
                writer.writerow([role, total, trainable, repr(fraction)])
    return 0


def _cmd_cka(args) -> int:
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.student)
    corpus = harness.load_corpus(args.corpus)
    matrix = harness.cka_heatmap(
        teacher, student, corpus.texts(), n_samples=args.n_samples,
        max_len=args.max_len,
    )
    harness.write_cka_csv(matrix, args.out)
    print(f"wrote {matrix.values.shape[0]}x{matrix.values.shape[1]} CKA grid to {args.out}")
    return 0


_COMMANDS = {
    "gen-toy": _cmd_gen_toy,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "param-report": _cmd_param_report,
    "cka": _cmd_cka,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # surface a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
