"""``lmforge`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or runtime failure. Progress
goes to stderr; deterministic, machine-readable results go to stdout.
Every flag may also be supplied through ``--config run.json`` (keys are flag
names with ``-`` or ``_``); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .baselines import NGramModel, StaticEmbeddings, perplexity, train_ngram, train_static_embeddings
from .baselines.ngram import EvaluationError as NGramEvaluationError
from .corpus import CorpusError, bundled, load_corpus, load_sentiment, load_wordsim
from .downstream import UnbalancedDatasetError, sentiment_experiment
from .evaluation import (EvaluationError, MaskCountError, TransformerWordVectors, WordVectors, eval_heldout_loss, eval_wordsim,
                         fill_mask, write_report)
from .model import (CheckpointError, ModelConfig, distil_mbert_config, load_checkpoint, mbert_config,
                    roberta_small_config)
from .tensor import NonFiniteError
from .tokenizer import load_tokenizer, train_tokenizer
from .training import DistillationConfig, MaskingPolicy, Schedule, distill, finetune, pretrain

log = logging.getLogger("lmforge")

EXIT_USAGE = 1
EXIT_FAILURE = 2

PRESETS: dict[str, Callable[[], dict]] = {
    "tiny": lambda: dict(hidden_size=64, num_layers=2, num_heads=4, feedforward_size=256, max_positions=128),
    "mbert": lambda: _dims(mbert_config()),
    "distil-mbert": lambda: _dims(distil_mbert_config()),
    "roberta-small": lambda: _dims(roberta_small_config()),
}

DIM_FLAGS = ("hidden_size", "num_layers", "num_heads", "feedforward_size", "max_positions")

# subcommand -> flags that must be present after merging the run config
REQUIRED = {
    "train-tokenizer": ("corpus", "out"),
    "pretrain": ("corpus", "tokenizer", "out"),
    "finetune": ("model", "corpus", "out"),
    "distill": ("teacher", "corpus", "out"),
    "fill-mask": ("model", "text"),
    "eval-loss": ("model", "corpus"),
    "eval-wordsim": (),
    "train-ngram": ("corpus", "out"),
    "eval-ngram": ("model", "corpus"),
    "train-embeddings": ("corpus", "out"),
    "sentiment": ("model",),
}


def _dims(cfg: ModelConfig) -> dict:
    return {k: getattr(cfg, k) for k in DIM_FLAGS}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument definitions ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory (or file, where noted)")
    p.add_argument("--config", help="JSON run config; explicit flags override its values")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages on stderr")


def _schedule_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("schedule")
    g.add_argument("--epochs", type=int, default=1)
    g.add_argument("--batch-size", type=int, default=8)
    g.add_argument("--lr", type=float, default=1e-4, help="peak learning rate")
    g.add_argument("--warmup", type=float, default=0.1, help="warmup fraction of total steps")
    g.add_argument("--max-seq", type=int, default=64, help="maximum sequence length incl. special tokens")
    g.add_argument("--num-examples", type=int, default=None, help="examples per epoch (default: one per sentence)")
    g.add_argument("--positive-fraction", type=float, default=0.5, help="share of true next-sentence pairs")
    g.add_argument("--static-masking", action="store_true", help="mask once instead of every epoch")
    _policy_flags(g)


def _policy_flags(g) -> None:
    g.add_argument("--select-prob", type=float, default=0.15, help="probability a token is selected for MLM")
    g.add_argument("--mask-frac", type=float, default=0.8)
    g.add_argument("--random-frac", type=float, default=0.1)
    g.add_argument("--keep-frac", type=float, default=0.1)


def build_parser() -> Parser:
    parser = Parser(prog="lmforge", description="Train and evaluate small transformer language models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("train-tokenizer", help="learn a WordPiece or BPE vocabulary")
    p.add_argument("--algo", choices=("wordpiece", "bpe"), default="wordpiece")
    p.add_argument("--corpus", help="training corpus file")
    p.add_argument("--vocab-size", type=int, default=None, help="default 30000 (wordpiece) / 52000 (bpe)")
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--lowercase", action="store_true", help="train an uncased tokenizer")
    _common(p)

    p = sub.add_parser("pretrain", help="train a model from scratch")
    p.add_argument("--corpus")
    p.add_argument("--tokenizer", help="tokenizer directory")
    p.add_argument("--flavor", choices=("bert", "distil", "roberta"), default="bert")
    p.add_argument("--preset", choices=tuple(PRESETS), default="tiny", help="model dimensions")
    for name in DIM_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), type=int, default=None, help="overrides the preset")
    _schedule_flags(p)
    _common(p)

    p = sub.add_parser("finetune", help="continue training a checkpoint on new data")
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--corpus")
    p.add_argument("--tokenizer", help="replacement tokenizer directory (re-initialises embeddings)")
    _schedule_flags(p)
    _common(p)

    p = sub.add_parser("distill", help="distil a frozen teacher into a smaller student")
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p.add_argument("--corpus")
    p.add_argument("--student-layers", type=int, default=None, help="default: half the teacher's layers")
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--alpha-soft", type=float, default=0.5)
    p.add_argument("--alpha-mlm", type=float, default=0.2)
    p.add_argument("--alpha-cos", type=float, default=0.3)
    p.add_argument("--random-init", action="store_true", help="do not copy teacher layers into the student")
    _schedule_flags(p)
    _common(p)

    p = sub.add_parser("fill-mask", help="top-k completions of a [MASK] token")
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--text", help="input containing exactly one [MASK]")
    p.add_argument("--top-k", type=int, default=5)
    _common(p)

    p = sub.add_parser("eval-loss", help="held-out MLM/NSP loss of a checkpoint")
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-seq", type=int, default=64)
    _policy_flags(p)
    _common(p)

    p = sub.add_parser("eval-wordsim", help="Spearman correlation on a word-similarity set")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--vectors", help="embedding text file or .npz model from train-embeddings")
    src.add_argument("--model", help="transformer checkpoint directory")
    p.add_argument("--dataset", help="word-similarity TSV (default: bundled Twi-style set)")
    p.add_argument("--oov-policy", choices=("skip", "subword-backoff"), default=None)
    _common(p)

    p = sub.add_parser("train-ngram", help="count-based n-gram baseline")
    p.add_argument("--corpus")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--add-k", type=float, default=1.0)
    _common(p)

    p = sub.add_parser("eval-ngram", help="perplexity of an n-gram model")
    p.add_argument("--model", help="model.json file or the directory holding it")
    p.add_argument("--corpus")
    _common(p)

    p = sub.add_parser("train-embeddings", help="skip-gram embeddings with character n-grams")
    p.add_argument("--corpus")
    p.add_argument("--dim", type=int, default=50)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--minn", type=int, default=3)
    p.add_argument("--maxn", type=int, default=6)
    p.add_argument("--buckets", type=int, default=200_000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--min-count", type=int, default=1)
    _common(p)

    p = sub.add_parser("sentiment", help="kNN sentiment experiment over sentence embeddings")
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--dataset", help="sentiment TSV (default: bundled 20-sample set)")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--pooling", choices=("mean", "cls"), default="mean")
    p.add_argument("--unstratified", action="store_true", help="draw splits without balancing labels")
    p.add_argument("--no-strict", action="store_true", help="allow unbalanced datasets")
    _common(p)
    return parser


# -- config merging ------------------------------------------------------------------------


def _flatten_config(raw: dict) -> dict:
    flat = {}
    for key, value in raw.items():
        if key == "policy" and isinstance(value, dict):
            flat.update(_flatten_config(value))
        else:
            flat[key.replace("-", "_")] = value
    return flat


def _parse(parser: Parser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise CorpusError(f"{args.config}: run config must be a JSON object")
        if "dynamic_masking" in raw:
            raw["static_masking"] = not raw.pop("dynamic_masking")
        cfg = _flatten_config(raw)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known - {"config"})
        if unknown:
            sub.error(f"unknown key(s) in {args.config}: {', '.join(unknown)}")
        cfg.pop("config", None)
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [name for name in REQUIRED[args.command] if getattr(args, name, None) is None]
    if missing:
        sub.error("the following arguments are required: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if args.seed < 0 or args.seed >= 2 ** 64:
        sub.error("--seed must be an unsigned 64-bit integer")
    return args


# -- helpers ------------------------------------------------------------------------------------


def _emit(lines) -> None:
    sys.stdout.write("".join(f"{line}\n" for line in lines))
    sys.stdout.flush()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {p} not found")
    return p


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory {p} not found")
    return p


def _schedule(args) -> Schedule:
    try:
        return Schedule(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, warmup=args.warmup,
                        seed=args.seed, max_seq=args.max_seq, num_examples=args.num_examples,
                        positive_fraction=args.positive_fraction, dynamic_masking=not args.static_masking,
                        policy=_policy(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _policy(args) -> MaskingPolicy:
    try:
        return MaskingPolicy(args.select_prob, args.mask_frac, args.random_frac, args.keep_frac)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train_lines(report) -> list[str]:
    lines = report.tsv(include_time=False).rstrip("\n").split("\n")
    lines += [f"initial_loss\t{report.initial_loss:.6f}", f"final_loss\t{report.final_loss:.6f}",
              f"steps\t{report.steps}", f"checkpoint\t{report.checkpoint_path}"]
    if report.final_kl is not None:
        lines.append(f"final_kl\t{report.final_kl:.6f}")
    return lines


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# -- subcommands ----------------------------------------------------------------------------------


def cmd_train_tokenizer(args) -> list[str]:
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    log.info("training %s tokenizer on %d sentences", args.algo, sum(len(d) for d in corpus.documents))
    tok = train_tokenizer(args.algo, corpus, args.vocab_size, args.min_frequency,
                          lowercase=True if args.lowercase else None)
    files = tok.save(_make_out(args))
    return [f"algo\t{args.algo}", f"vocab_size\t{len(tok)}"] + [f"file\t{f}" for f in files]


def cmd_pretrain(args) -> list[str]:
    corpus_path = _require_file(args.corpus, "corpus")
    tokenizer = load_tokenizer(_require_dir(args.tokenizer, "tokenizer"))
    dims = PRESETS[args.preset]()
    for name in DIM_FLAGS:
        if getattr(args, name) is not None:
            dims[name] = getattr(args, name)
    dims["max_positions"] = max(dims["max_positions"], args.max_seq)
    config = ModelConfig.for_flavor(args.flavor, vocab_size=len(tokenizer), cased=not tokenizer.lowercase, **dims)
    corpus = load_corpus(corpus_path, "uncased" if tokenizer.lowercase else "cased")
    out = _make_out(args)
    return _train_lines(pretrain(config, corpus, tokenizer, _schedule(args), out_dir=out))


def cmd_finetune(args) -> list[str]:
    model = _require_dir(args.model, "checkpoint")
    corpus_path = _require_file(args.corpus, "corpus")
    new_tok = load_tokenizer(_require_dir(args.tokenizer, "tokenizer")) if args.tokenizer else None
    lowercase = new_tok.lowercase if new_tok else load_tokenizer(model).lowercase
    corpus = load_corpus(corpus_path, "uncased" if lowercase else "cased")
    out = _make_out(args)
    return _train_lines(finetune(model, corpus, _schedule(args), replace_tokenizer=new_tok, out_dir=out))


def cmd_distill(args) -> list[str]:
    teacher = _require_dir(args.teacher, "teacher checkpoint")
    corpus_path = _require_file(args.corpus, "corpus")
    t_params, t_config = load_checkpoint(teacher)
    tokenizer = load_tokenizer(teacher)
    layers = args.student_layers or max(1, t_config.num_layers // 2)
    flavor = "distil" if t_config.flavor == "bert" else t_config.flavor
    s_config = replace(t_config, flavor=flavor, num_layers=layers, num_segment_types=0)
    dconf = DistillationConfig(args.temperature, args.alpha_soft, args.alpha_mlm, args.alpha_cos,
                               init_from_teacher=not args.random_init)
    corpus = load_corpus(corpus_path, "uncased" if tokenizer.lowercase else "cased")
    out = _make_out(args)
    return _train_lines(distill((t_params, t_config, tokenizer), s_config, corpus, dconf, _schedule(args), out))


def _load_model(path):
    path = _require_dir(path, "checkpoint")
    params, config = load_checkpoint(path)
    return params, config, load_tokenizer(path)


def cmd_fill_mask(args) -> list[str]:
    params, config, tokenizer = _load_model(args.model)
    lines = [f"{c.score:.6f}\t{tokenizer.display_token(c.token)}\t{c.sequence}"
             for c in fill_mask(params, config, tokenizer, args.text, args.top_k)]
    if args.out:
        _write_file(args.out, lines)
    return lines


def cmd_eval_loss(args) -> list[str]:
    params, config, tokenizer = _load_model(args.model)
    corpus = load_corpus(_require_file(args.corpus, "corpus"), "uncased" if tokenizer.lowercase else "cased")
    res = eval_heldout_loss(params, config, tokenizer, corpus, _policy(args), args.seed, args.batch_size, args.max_seq)
    metrics = [("mlm_loss", _fmt(res.mlm)), ("nsp_loss", _fmt(res.nsp)), ("total_loss", _fmt(res.total))]
    if args.out:
        write_report(_out_file(args.out, "report.tsv"), metrics)
    return [f"{k}\t{v}" for k, v in metrics]


def cmd_eval_wordsim(args) -> list[str]:
    dataset = load_wordsim(_require_file(args.dataset, "dataset") if args.dataset else bundled("wordsim_twi.tsv"))
    if args.model:
        params, config, tokenizer = _load_model(args.model)
        source = TransformerWordVectors(params, config, tokenizer)
    elif args.vectors:
        vpath = _require_file(args.vectors, "vectors file")
        source = StaticEmbeddings.load(vpath) if vpath.suffix == ".npz" else WordVectors.load(vpath)
    else:
        raise UsageError("one of --vectors or --model is required")
    report = eval_wordsim(source, dataset, args.oov_policy)
    lines = report.lines()
    if args.out:
        _write_file(_out_file(args.out, "wordsim.tsv"), lines)
    return lines


def cmd_train_ngram(args) -> list[str]:
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    model = train_ngram(corpus, args.order, args.add_k)
    out = _make_out(args)
    model.save(out / "model.json")
    lines = [f"order\t{model.order}", f"add_k\t{model.add_k}", f"vocab_size\t{model.vocab_size}",
             f"ngram_types\t{len(model.ngram_counts)}"]
    try:
        lines.append(f"train_perplexity\t{perplexity(model, corpus):.6f}")
    except NGramEvaluationError:
        lines.append("train_perplexity\tinf")
    return lines


def cmd_eval_ngram(args) -> list[str]:
    mpath = Path(args.model)
    if mpath.is_dir():
        mpath = mpath / "model.json"
    model = NGramModel.load(_require_file(mpath, "n-gram model"))
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    ppl = perplexity(model, corpus)
    lines = [f"perplexity\t{ppl:.6f}", f"sentences\t{len(corpus.sentences)}"]
    if args.out:
        _write_file(_out_file(args.out, "report.tsv"), lines)
    return lines


def cmd_train_embeddings(args) -> list[str]:
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    emb = train_static_embeddings(corpus, dim=args.dim, window=args.window, negatives=args.negatives,
                                  epochs=args.epochs, minn=args.minn, maxn=args.maxn, buckets=args.buckets,
                                  lr=args.lr, seed=args.seed, min_count=args.min_count)
    out = _make_out(args)
    emb.save_text(out / "vectors.txt")
    emb.save(out / "model.npz")
    return ([f"words\t{len(emb.words)}", f"dim\t{emb.dim}"]
            + [f"epoch_loss\t{i}\t{loss:.6f}" for i, loss in enumerate(emb.epoch_losses, start=1)])


def cmd_sentiment(args) -> list[str]:
    dataset = load_sentiment(_require_file(args.dataset, "dataset") if args.dataset else bundled("sentiment20.tsv"))
    params, config, tokenizer = _load_model(args.model)
    report = sentiment_experiment(params, config, tokenizer, dataset, trials=args.trials, k=args.k, seed=args.seed,
                                  pooling=args.pooling, metric=args.metric, stratified=not args.unstratified,
                                  strict=not args.no_strict)
    if args.out:
        report.save(_out_file(args.out, "sentiment.tsv"))
    return report.tsv().rstrip("\n").split("\n")


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "distill": cmd_distill,
    "fill-mask": cmd_fill_mask,
    "eval-loss": cmd_eval_loss,
    "eval-wordsim": cmd_eval_wordsim,
    "train-ngram": cmd_train_ngram,
    "eval-ngram": cmd_eval_ngram,
    "train-embeddings": cmd_train_embeddings,
    "sentiment": cmd_sentiment,
}


# -- output bookkeeping ---------------------------------------------------------------------------

# paths created by this invocation; removed again if the command fails
_created: list[Path] = []


def _make_out(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"--out {out} exists and is not a directory")
    if not out.exists():
        out.mkdir(parents=True)
        _created.append(out)
    return out


def _out_file(out: str, default_name: str) -> Path:
    """``--out`` names a directory (file written inside) unless it has a suffix."""
    p = Path(out)
    if p.suffix and not p.is_dir():
        if not p.parent.exists():
            p.parent.mkdir(parents=True)
            _created.append(p.parent)
        return p
    if not p.exists():
        p.mkdir(parents=True)
        _created.append(p)
    return p / default_name


def _write_file(path, lines) -> None:
    path = Path(path)
    if not path.parent.exists():
        path.parent.mkdir(parents=True)
        _created.append(path.parent)
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    _created.append(path)


def _cleanup() -> None:
    for p in reversed(_created):
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        elif p.exists():
            p.unlink()
    _created.clear()


DATA_ERRORS = (FileNotFoundError, NotADirectoryError, CorpusError, CheckpointError, EvaluationError,
               NGramEvaluationError, NonFiniteError, ValueError, OSError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except DATA_ERRORS as exc:
        print(f"lmforge: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(message)s", force=True)
    _created.clear()
    try:
        lines = COMMANDS[args.command](args)
    except (UsageError, MaskCountError, UnbalancedDatasetError) as exc:
        _cleanup()
        print(f"lmforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        _cleanup()
        print(f"lmforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    _created.clear()
    _emit(lines)
    return 0


def run(argv: Sequence[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
