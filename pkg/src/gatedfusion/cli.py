"""``gatedfusion`` command line: build-vocab, train, generate, eval, synth, gradcheck.

Exit codes: 0 success, 1 validation/usage error, 2 data/format error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from . import corpus, gradcheck
from .config import load_run_config, parse_override
from .corpus import Vocabulary
from .errors import ConfigError, DataError, GatedFusionError
from .generator import DecodeConfig, decode_many
from .metrics import EvalRow, evaluate_variant, report
from .model import init_parameters, load_checkpoint, save_checkpoint
from .plotting import loss_curve_svg
from .trainer import train

log = logging.getLogger("gatedfusion")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Staging:
    """Collect outputs in a scratch directory; publish them only on success."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir

    def __enter__(self) -> Path:
        parent = self.out_dir.parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for item in sorted(self.tmp.iterdir()):
                target = self.out_dir / item.name
                if target.exists():
                    target.unlink()
                shutil.move(str(item), target)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_pairs_tsv(path: Path, text_pairs):
    path.write_text("".join(" ".join(s) + "\t" + " ".join(t) + "\n" for s, t in text_pairs), encoding="utf-8")


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(args.strategy, args.temperature, args.top_k, args.max_len, args.seed).validate()


# --- commands ---------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    if args.max_size < 5:
        raise ConfigError("--max-size must be >= 5")
    try:
        texts = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {args.corpus}: {exc.strerror}") from exc
    # TABs are whitespace to the tokenizer, so paired files need no special case
    vocab = corpus.build_vocab(texts, args.min_freq, args.max_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    print(f"{len(vocab)} tokens -> {out}")
    return 0


def cmd_train(args) -> int:
    overrides = [parse_override(s) for s in args.set]
    if args.seed is not None:
        overrides.append(("run.seed", str(args.seed)))
    if args.out is not None:
        overrides.append(("run.out_dir", args.out))
    cfg = load_run_config(args.config, overrides).validate()
    if not cfg.data.corpus:
        raise ConfigError("data.corpus is required")

    text_pairs, _ = corpus.read_text_pairs(cfg.data.corpus, cfg.data.mode, cfg.data.prefix_fraction)
    if cfg.data.vocab:
        vocab = Vocabulary.load(cfg.data.vocab)
    else:
        vocab = corpus.build_vocab((" ".join(s + t) for s, t in text_pairs), cfg.data.min_freq, cfg.data.max_vocab)
    cfg = cfg.resolved(vocab_size=len(vocab)).validate()
    cfg.model.validate()
    pairs = [corpus.ExamplePair.from_tokens(s, t, vocab) for s, t in text_pairs]
    # split indices so the held-out text can be written back verbatim
    index = corpus.split_corpus(range(len(pairs)), cfg.run.seed)
    split = corpus.CorpusSplit(*([pairs[i] for i in part] for part in (index.train, index.validation, index.test)))
    too_long = [p for p in pairs if len(p.source) > cfg.model.max_len or len(p.target) - 1 > cfg.model.max_len]
    if too_long:
        raise ConfigError(f"{len(too_long)} pairs exceed model.max_len={cfg.model.max_len}")

    out_dir = Path(cfg.run.out_dir)
    with _Staging(out_dir) as tmp:
        (tmp / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
        vocab.save(tmp / "vocab.txt")
        for name, part in (("train", index.train), ("val", index.validation), ("test", index.test)):
            _write_pairs_tsv(tmp / f"{name}.tsv", [text_pairs[i] for i in part])

        def on_checkpoint(epoch, model):
            save_checkpoint(model, tmp / f"epoch_{epoch:04d}.ckpt")

        model, history = train(init_parameters(cfg.model), split, cfg.train, on_checkpoint)
        save_checkpoint(model, tmp / "model.ckpt")
        history.write_csv(tmp / "train_log.csv")
        (tmp / "loss_curve.svg").write_text(loss_curve_svg(history), encoding="utf-8")
    print(f"trained {len(history.epoch_means())} epochs -> {out_dir}")
    return 0


def _load_pair(checkpoint, vocab_path):
    model = load_checkpoint(checkpoint)
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != model.config.vocab_size:
        raise DataError(
            f"vocabulary {vocab_path} has {len(vocab)} tokens but checkpoint expects {model.config.vocab_size}"
        )
    return model, vocab


def cmd_generate(args) -> int:
    decode = _decode_config(args)
    if args.input is not None:
        lines = [args.input]
    else:
        try:
            lines = Path(args.input_file).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read {args.input_file}: {exc.strerror}") from exc
    sources = []
    for line in lines:
        toks = corpus.tokenize(line)
        if not toks:
            raise ConfigError("source must be non-empty")
        sources.append(toks)
    model, vocab = _load_pair(args.checkpoint, args.vocab)
    outputs = decode_many(model, [corpus.encode(s, vocab) for s in sources], decode)
    for ids in outputs:
        print(" ".join(corpus.decode(ids, vocab)))
    return 0


def cmd_eval(args) -> int:
    decode = _decode_config(args)
    names = args.name or []
    if names and len(names) != len(args.checkpoint):
        raise ConfigError("give one --name per --checkpoint or none at all")
    if not Path(args.test).is_file():
        raise DataError(f"test file not found: {args.test}")
    vocab = Vocabulary.load(args.vocab)
    pairs = corpus.load_pairs(args.test, vocab, args.mode)
    if not pairs:
        raise DataError(f"no pairs in {args.test}")
    rows = []
    for i, path in enumerate(args.checkpoint):
        model, _ = _load_pair(path, args.vocab)
        name = names[i] if names else Path(path).stem
        ppl, bleu = evaluate_variant(model, pairs, decode)
        rows.append(EvalRow(name, ppl, bleu.score, decode.strategy, args.dataset or Path(args.test).name, args.seed))
    result = report(rows)
    table = result.render()
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(result.to_csv(), encoding="utf-8")
        out.with_suffix(".txt").write_text(table, encoding="utf-8")
    return 0


def cmd_synth(args) -> int:
    if args.task != "reversal":
        raise ConfigError(f"unknown task {args.task!r}")
    if args.alphabet < 1 or args.n < 1 or args.len < 1:
        raise ConfigError("--n, --len and --alphabet must all be >= 1")
    rows = corpus.synth_reversal_tokens(args.n, args.len, args.alphabet, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_pairs_tsv(out, rows)
    print(f"{len(rows)} pairs -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradcheck.run(args.seed, args.fusion_mode, args.gate_granularity)
    worst = 0.0
    for name, err in errors.items():
        ok = err < args.tolerance
        worst = max(worst, err)
        print(f"{'ok  ' if ok else 'FAIL'} {name:<24} {err:.3e}")
    passed = worst < args.tolerance
    print(f"max relative error {worst:.3e} ({'pass' if passed else 'fail'}, tolerance {args.tolerance:g})")
    return 0 if passed else 1


# --- wiring -----------------------------------------------------------------


def _add_decode_flags(p):
    p.add_argument("--strategy", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatedfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=50_000)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode text with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--input")
    group.add_argument("--input-file")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="perplexity/BLEU report over checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--name", action="append")
    p.add_argument("--vocab", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mode", choices=("paired-tsv", "auto-split"), default="paired-tsv")
    p.add_argument("--dataset", default="")
    p.add_argument("--out")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic paired-tsv dataset")
    p.add_argument("--task", default="reversal")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--alphabet", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fusion-mode", default="both")
    p.add_argument("--gate-granularity", default="scalar")
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except GatedFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
