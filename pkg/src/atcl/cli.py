"""Command-line entry point: ``atcl <subcommand> ...``.

Exit status:
  0  success
  1  unexpected internal error
  2  usage error (bad flags)
  3  missing or unreadable file
  4  invalid configuration (unknown key, bad value)
  5  training aborted on a non-finite loss
  6  rejected input (out-of-vocabulary word, masked target, empty corpus, ...)

Errors are printed to standard error as one line: ``error <code> <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation as ev
from .model import build_model, load_checkpoint
from .tasks import model_max_len, task_from_files
from .text import MergeTable, Vocabulary, bpe_train, build_vocab, bpe_tokenize, make_batches, read_corpus, read_parallel, word_counts
from .training import CHECKPOINT_NAME, ConfigError, NonFiniteLossError, RngStreams, TrainConfig, parse_overrides, train

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_NAN, EXIT_INPUT = range(7)
VOCAB_NAME, CONFIG_NAME, MERGES_NAME = "vocab.txt", "config.txt", "merges.txt"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


# ---------------------------------------------------------------------------
# loading a trained run
# ---------------------------------------------------------------------------


class Run:
    """A checkpoint plus the vocabulary, config and merges saved beside it."""

    def __init__(self, checkpoint: str):
        path = Path(checkpoint)
        if path.is_dir():
            path = path / CHECKPOINT_NAME
        if not path.is_file():
            raise FileNotFoundError(f"{path}: no such checkpoint")
        self.path = path
        self.config = TrainConfig.from_file(path.parent / CONFIG_NAME)
        self.vocab = Vocabulary.load(path.parent / VOCAB_NAME)
        merges = path.parent / MERGES_NAME
        self.merges = MergeTable.load(merges) if merges.is_file() else None
        self.model = build_model(self.config.model_config(len(self.vocab), model_max_len(self.config)))
        self.params, _ = load_checkpoint(path, self.model.config)

    def require(self, task: str) -> None:
        if self.config.task != task:
            raise CliError(EXIT_INPUT, "rejected-input", f"this command needs a task={task} checkpoint")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> None:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config = TrainConfig.from_file(args.config, overrides) if args.config else TrainConfig.from_mapping(parse_overrides(overrides))
    out = Path(args.out or config.out_dir)
    data = task_from_files(config)
    out.mkdir(parents=True, exist_ok=True)
    data.vocab.save(out / VOCAB_NAME)
    (out / CONFIG_NAME).write_text(config.to_text(), encoding="utf-8")
    if data.merges is not None:
        data.merges.save(out / MERGES_NAME)
    result = train(config, data, out, resume=args.resume, overrides=parse_overrides(overrides))
    last = result.records[-1].log_record() if result.records else {}
    print(json.dumps({"out_dir": str(out), "steps": config.max_steps, **{k: last.get(k) for k in ("L", "J")},
                      **(result.evals[-1] if result.evals else {})}))


def cmd_eval_ppl(args) -> None:
    run = Run(args.checkpoint)
    run.require("lm")
    batches = make_batches(read_corpus(args.corpus), run.vocab, run.config.batch_size, run.config.seq_len)
    print(f"{ev.perplexity(run.model, run.params, batches):.6f}")


def cmd_eval_bleu(args) -> None:
    if args.checkpoint:
        run = Run(args.checkpoint)
        run.require("nmt")
        pairs = read_parallel(args.src, args.ref)
        hyps = ev.translate(run.model, run.params, run.vocab, [s for s, _ in pairs], run.merges,
                            run.config.decode_max_len)
        refs = [t for _, t in pairs]
    else:
        if not args.hyp:
            raise CliError(EXIT_USAGE, "usage", "eval-bleu needs --checkpoint with --src, or --hyp")
        hyps, refs = read_corpus_lines(args.hyp), read_corpus_lines(args.ref)
    result = ev.bleu_stats(hyps, refs)
    print(json.dumps({"bleu": result.score, "bleu_unsmoothed": result.unsmoothed,
                      "brevity_penalty": result.brevity_penalty}))


def read_corpus_lines(path: str) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_translate(args) -> None:
    run = Run(args.checkpoint)
    run.require("nmt")
    sentences = read_corpus_lines(args.input) if args.input else [line.strip() for line in sys.stdin]
    for line in ev.translate(run.model, run.params, run.vocab, sentences, run.merges, run.config.decode_max_len):
        print(line)


def _emit(report: ev.ProbeReport, as_json: bool) -> None:
    print(report.to_json() if as_json else report.to_text())


def cmd_probe_neighbors(args) -> None:
    run = Run(args.checkpoint)
    words = args.word
    for word in words:
        _emit(ev.neighbors_report(run.params, run.vocab, word, args.k, str(run.path)), args.json)


def cmd_attack(args) -> None:
    run = Run(args.checkpoint)
    run.require("lm")
    report = ev.targeted_attack_completion(run.model, run.params, run.vocab, args.sentence, args.position,
                                           args.epsilon, run.config.fgm_sign, checkpoint=str(run.path))
    _emit(report, args.json)


def cmd_robustness(args) -> None:
    run = Run(args.checkpoint)
    run.require("lm")
    batches = make_batches(read_corpus(args.corpus), run.vocab, run.config.batch_size, run.config.seq_len)
    epsilon = run.config.epsilon if args.epsilon is None else args.epsilon
    rng = RngStreams(run.config.seed if args.seed is None else args.seed).evaluation()
    value = ev.robustness_divergence(run.model, run.params, batches, run.vocab.restricted_flag, epsilon,
                                     args.samples, rng, run.config.fgm_sign)
    print(json.dumps({"robustness_divergence": value, "epsilon": epsilon, "samples": args.samples}))


def cmd_bpe_train(args) -> None:
    sentences = [s for path in args.corpus for s in read_corpus(path)]
    merges = bpe_train(word_counts(sentences), args.merges)
    merges.save(args.output)
    print(json.dumps({"merges": len(merges), "output": args.output}))


def cmd_vocab_build(args) -> None:
    sentences = [s for path in args.corpus for s in read_corpus(path)]
    merges = MergeTable.load(args.bpe) if args.bpe else None
    split = (lambda s: bpe_tokenize(s, merges)) if merges is not None else str.split
    vocab = build_vocab([split(s) for s in sentences], args.min_frequency)
    vocab.save(args.output)
    print(json.dumps({"size": len(vocab), "restricted": int(vocab.restricted_flag.sum()), "output": args.output}))


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atcl", description="Adversarial-contrastive training for transformer LMs and NMT.",
                epilog=__doc__.split("\n", 2)[2], formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model; writes checkpoint, vocab, config and metrics log")
    t.add_argument("--config", help="flat 'key = value' config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default: out_dir from config)")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-ppl", help="perplexity of a corpus under an LM checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.set_defaults(func=cmd_eval_ppl)

    b = sub.add_parser("eval-bleu", help="corpus BLEU of a translation checkpoint, or of a hypothesis file")
    b.add_argument("--checkpoint")
    b.add_argument("--src")
    b.add_argument("--hyp")
    b.add_argument("--ref", required=True)
    b.set_defaults(func=cmd_eval_bleu)

    tr = sub.add_parser("translate", help="greedy translation, one sentence per line")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", help="source file (default: stdin)")
    tr.set_defaults(func=cmd_translate)

    n = sub.add_parser("probe-neighbors", help="closest embedding rows by Euclidean distance")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--word", required=True, action="append")
    n.add_argument("--k", type=int, default=4)
    n.add_argument("--json", action="store_true", help="emit one JSON record per probe")
    n.set_defaults(func=cmd_probe_neighbors)

    a = sub.add_parser("attack", help="perturb one word's embedding and greedily complete the sentence")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--sentence", required=True)
    a.add_argument("--position", type=int, required=True, help="0-based index of the target word")
    a.add_argument("--epsilon", type=float, default=0.03)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("robustness", help="mean KL between clean and perturbed next-token distributions")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--epsilon", type=float, help="default: the training epsilon")
    r.add_argument("--samples", type=int, default=200)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_robustness)

    bp = sub.add_parser("bpe-train", help="learn BPE merges from whitespace-tokenised corpora")
    bp.add_argument("--corpus", required=True, action="append")
    bp.add_argument("--merges", type=int, required=True)
    bp.add_argument("--output", required=True)
    bp.set_defaults(func=cmd_bpe_train)

    v = sub.add_parser("vocab-build", help="build a frequency-ordered vocabulary file")
    v.add_argument("--corpus", required=True, action="append")
    v.add_argument("--bpe", help="merges file to segment with first")
    v.add_argument("--min-frequency", type=int, default=1)
    v.add_argument("--output", required=True)
    v.set_defaults(func=cmd_vocab_build)
    return p


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, ConfigError):
        return CliError(EXIT_CONFIG, "config", str(exc))
    if isinstance(exc, NonFiniteLossError):
        return CliError(EXIT_NAN, "non-finite-loss", str(exc))
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError, OSError)):
        return CliError(EXIT_IO, "io", str(exc))
    if isinstance(exc, ValueError):
        return CliError(EXIT_INPUT, "rejected-input", str(exc))
    return CliError(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit code
        err = _classify(exc)
        message = " ".join(str(err).split())
        print(f"error {err.code} {err.kind}: {message}", file=sys.stderr)
        return err.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
