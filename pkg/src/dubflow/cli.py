"""Command-line entry point.

Exit codes: 0 success, 2 I/O error, 3 invalid arguments or config, 4 data
parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .alignment import DEFAULT_TAU, DurationTable, TOKENS_PER_BEAT, alignment_from_counts, contrastive_alignment_loss, mas, path_to_durations
from .denoiser import ExactPosteriorDenoiser, TabularDenoiser, tabular_train
from .dfm import Scheduler, sample_batch
from .errors import DomainError, DubflowError, ShapeError
from .experiments import SweepConfig, TwoStageConfig, run_nfe_sweep, run_two_stage
from .tokens import GenerativeTarget
from .toyworld import CORPUS_SUFFIX, ToyConfig, context_of, gen_corpus, read_corpus, training_examples, write_corpus

log = logging.getLogger("dubflow")

EXIT_OK, EXIT_IO, EXIT_ARGS, EXIT_PARSE = 0, 2, 3, 4
CONFIG_SCHEMA_VERSION = 1
DEFAULT_COUNT = 64


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_ARGS, f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # Flags defaulting to None take their value from the config file; their help says so.
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit value, got {value}")
    return value


def _nfe_list(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--nfe-list must be comma-separated integers, got {text!r}") from None


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_ARGS, f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise CliError(EXIT_ARGS, f"config {path} must be a JSON object")
    version = obj.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise CliError(EXIT_ARGS, f"config {path}: unsupported schema_version {version!r}")
    return obj


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _read_corpus(path: str):
    try:
        return read_corpus(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read corpus {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_PARSE, f"cannot parse corpus {path}: {exc}") from exc


def _toy_config(conf: dict, seed: Optional[int]) -> ToyConfig:
    conf = dict(conf)
    if seed is not None:
        conf["seed"] = seed
    try:
        return ToyConfig.from_json(conf)
    except TypeError as exc:
        raise CliError(EXIT_ARGS, f"invalid toy config: {exc}") from exc


def cmd_gen(args) -> int:
    conf = _load_config(args.config)
    count = args.count if args.count is not None else int(conf.pop("count", DEFAULT_COUNT))
    conf.pop("count", None)
    cfg = _toy_config(conf, args.seed)
    corpus = gen_corpus(cfg, count)
    path = _out_dir(args.out) / f"corpus{CORPUS_SUFFIX}"
    try:
        write_corpus(path, corpus)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc
    lay = cfg.layout
    print(f"wrote {len(corpus)} samples to {path} (layout m={lay.m} n={lay.n} k={lay.k} v={lay.v})")
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _load_config(args.config)
    steps = args.steps if args.steps is not None else int(conf.get("steps", 2000))
    lr = args.lr if args.lr is not None else float(conf.get("lr", 0.5))
    mode = args.mode or conf.get("mode", "dub")
    seed = args.seed if args.seed is not None else int(conf.get("seed", 0))
    if steps < 0:
        raise CliError(EXIT_ARGS, f"--steps must be >= 0, got {steps}")
    corpus = _read_corpus(args.corpus)
    examples = training_examples(corpus, range(len(corpus)), mode)
    d = TabularDenoiser(
        corpus.config.layout,
        time_buckets=int(conf.get("time_buckets", 8)),
        max_position_buckets=int(conf.get("max_position_buckets", 16)),
    )
    _, trace = tabular_train(d, examples, steps, lr, Scheduler(), np.random.default_rng(seed))
    out = _out_dir(args.out)
    _write(out / "denoiser.json", json.dumps(d.to_json()) + "\n")
    lines = ["step,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(trace)]
    _write(out / "trace.csv", "\n".join(lines) + "\n")
    last = f"{trace[-1]:.4f}" if trace else "n/a"
    print(f"trained {steps} steps (lr={lr}, mode={mode}); final loss {last}; {len(d.rows)} table rows")
    return EXIT_OK


def _load_denoiser(args, corpus):
    if args.oracle:
        return ExactPosteriorDenoiser.for_toy(corpus.config), "oracle"
    if not args.denoiser:
        raise CliError(EXIT_ARGS, "pass --denoiser PATH or --oracle")
    try:
        d = TabularDenoiser.load(args.denoiser)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read denoiser {args.denoiser}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_PARSE, f"cannot parse denoiser {args.denoiser}: {exc}") from exc
    if d.layout != corpus.config.layout:
        raise CliError(EXIT_ARGS, "denoiser layout does not match the corpus layout")
    return d, Path(args.denoiser).name


def cmd_sample(args) -> int:
    if args.nfe < 1:
        raise CliError(EXIT_ARGS, f"--nfe must be >= 1, got {args.nfe}")
    if args.count < 1:
        raise CliError(EXIT_ARGS, f"--count must be >= 1, got {args.count}")
    corpus = _read_corpus(args.corpus)
    denoiser, source = _load_denoiser(args, corpus)
    rng = np.random.default_rng(args.seed)
    sched = Scheduler()
    lines = [json.dumps({"schema_version": 1, "count": args.count, "nfe": args.nfe, "denoiser": source, "seed": args.seed}, sort_keys=True)]
    for i in range(args.count):
        s = corpus[i % len(corpus)]
        ctx = context_of(s, "dub")
        grid = sample_batch(denoiser, ctx, s.length, args.nfe, sched, rng, count=1)[0]
        target = GenerativeTarget(denoiser.layout, grid)
        lines.append(json.dumps({"index": i, "source_sample": i % len(corpus), "context": ctx.to_json(), "target": target.to_json()}, sort_keys=True))
    out = _out_dir(args.out) / "samples.jsonl"
    _write(out, "\n".join(lines) + "\n")
    print(f"wrote {args.count} samples at nfe={args.nfe} to {out}")
    return EXIT_OK


def _read_scores(path: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read scores {path}: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"cannot parse scores {path}: {exc}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise CliError(EXIT_PARSE, f"{path}: score grid must be a non-empty rectangular CSV")
    return np.array(rows)


def _read_counts(path: str, unit: str) -> list[int]:
    """Duration file: ``{"beats": [...]}`` (scaled by the unit rate) or explicit ``{"counts": [...]}``."""
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read durations {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"cannot parse durations {path}: {exc}") from exc
    if isinstance(obj, dict) and "counts" in obj:
        return [int(c) for c in obj["counts"]]
    if isinstance(obj, dict) and "beats" in obj:
        return DurationTable(tuple(obj["beats"])).counts(unit)
    raise CliError(EXIT_PARSE, f"{path}: expected an object with 'beats' or 'counts'")


def cmd_eval_align(args) -> int:
    scores = _read_scores(args.scores)
    counts = _read_counts(args.durations, args.unit)
    rows, N = scores.shape
    if args.unit == "tokens" and rows % TOKENS_PER_BEAT:
        raise CliError(EXIT_ARGS, f"{rows} token rows do not map to a whole number of frames (need a multiple of {TOKENS_PER_BEAT})")
    M = alignment_from_counts(counts)
    if M.shape != scores.shape:
        raise CliError(EXIT_ARGS, f"score grid {scores.shape} does not match alignment {M.shape}")
    loss = contrastive_alignment_loss(scores, M, args.tau)
    log_probs = scores / args.tau - np.logaddexp.reduce(scores / args.tau, axis=1, keepdims=True)
    durations = path_to_durations(mas(log_probs), N)
    name = "l_vt" if args.unit == "frames" else "l_st"
    report = {"unit": args.unit, "loss_name": name, "loss": loss, "tau": args.tau, "mas_durations": durations}
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.out:
        _write(_out_dir(args.out) / "eval_align.json", text + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    conf = _load_config(args.config)
    if args.nfe_list is not None:
        conf["nfe_list"] = args.nfe_list
    if args.count is not None:
        conf["samples"] = args.count
    if args.contexts is not None:
        conf["contexts"] = args.contexts
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.timing:
        conf["timing"] = True
    try:
        cfg = SweepConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in conf.items()})
    except TypeError as exc:
        raise CliError(EXIT_ARGS, f"invalid sweep config: {exc}") from exc
    if args.corpus:
        corpus = _read_corpus(args.corpus)
    else:
        corpus = gen_corpus(ToyConfig(seed=cfg.seed), 60)
    denoiser, _ = _load_denoiser(args, corpus)
    report = run_nfe_sweep(cfg, denoiser, corpus, threads=args.threads)
    out = _out_dir(args.out)
    _write(out / "sweep.json", report.to_json())
    _write(out / "sweep.csv", report.to_csv())
    print(f"wrote {len(report.rows)} sweep rows to {out}")
    return EXIT_OK


def cmd_two_stage(args) -> int:
    conf = _load_config(args.config)
    if "toy" in conf:
        conf["toy"] = _toy_config(conf["toy"], None)
    if args.steps is not None:
        conf["pretrain_steps"] = conf["adapt_steps"] = args.steps
    if args.pretrain_steps is not None:
        conf["pretrain_steps"] = args.pretrain_steps
    if args.adapt_steps is not None:
        conf["adapt_steps"] = args.adapt_steps
    if args.lr is not None:
        conf["lr"] = args.lr
    if args.seed is not None:
        conf["seed"] = args.seed
    try:
        cfg = TwoStageConfig(**conf)
    except TypeError as exc:
        raise CliError(EXIT_ARGS, f"invalid two-stage config: {exc}") from exc
    result = run_two_stage(cfg)
    out = _out_dir(args.out)
    _write(out / "two_stage.json", json.dumps(result.report, sort_keys=True, indent=2) + "\n")
    arms = result.report["arms"]
    for name, arm in arms.items():
        print(f"{name}: final_loss={arm['final_loss']} token_accuracy={arm['token_accuracy']} diverged={arm['diverged']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="dubflow", description="Discrete flow matching and alignment toolkit on a synthetic dubbing corpus.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default="out"):
        p.add_argument("--config", metavar="PATH", default=None, help="JSON config file with schema_version; flags override it")
        p.add_argument("--seed", type=_seed, default=None, metavar="U64", help="RNG seed (overrides config; default 0)")
        p.add_argument("--out", metavar="DIR", default=out_default, help="output directory (eval-align prints only when unset)" if out_default is None else "output directory")
        p.add_argument("--threads", type=int, default=1, metavar="N", help="maximum worker threads")
        p.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity")

    p = sub.add_parser("gen", help="generate a toy corpus", formatter_class=fmt)
    common(p)
    p.add_argument("--count", type=int, default=None, metavar="N", help=f"number of samples (config 'count', else {DEFAULT_COUNT})")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a tabular denoiser", formatter_class=fmt)
    common(p)
    p.add_argument("--corpus", required=True, metavar="PATH", help=f"corpus file ({CORPUS_SUFFIX})")
    p.add_argument("--steps", type=int, default=None, metavar="N", help="SGD steps (config 'steps', else 2000)")
    p.add_argument("--lr", type=float, default=None, metavar="F", help="learning rate (config 'lr', else 0.5)")
    p.add_argument("--mode", choices=("dub", "tts"), default=None, help="conditioning mode (config 'mode', else dub)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample generative targets", formatter_class=fmt)
    common(p)
    p.add_argument("--corpus", required=True, metavar="PATH", help="corpus supplying the dubbing contexts")
    p.add_argument("--denoiser", metavar="PATH", default=None, help="trained denoiser JSON")
    p.add_argument("--oracle", action="store_true", help="use the exact-posterior denoiser instead of a file")
    p.add_argument("--nfe", type=int, default=32, metavar="N", help="number of denoiser evaluations")
    p.add_argument("--count", type=int, default=10, metavar="N", help="number of sequences")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-align", help="contrastive alignment loss and MAS durations for a score grid", formatter_class=fmt)
    common(p, out_default=None)
    p.add_argument("--scores", required=True, metavar="CSV", help="rows x phonemes attention-score grid")
    p.add_argument("--durations", required=True, metavar="PATH", help='JSON {"beats": [...]} or {"counts": [...]}')
    p.add_argument("--unit", choices=("frames", "tokens"), default="frames", help="row granularity")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, metavar="F", help="softmax temperature")
    p.set_defaults(func=cmd_eval_align)

    p = sub.add_parser("sweep", help="NFE sweep against the exact toy law", formatter_class=fmt)
    common(p)
    p.add_argument("--corpus", metavar="PATH", default=None, help="corpus (default: 60 generated toy samples)")
    p.add_argument("--denoiser", metavar="PATH", default=None, help="trained denoiser JSON")
    p.add_argument("--oracle", action="store_true", help="use the exact-posterior denoiser")
    p.add_argument("--nfe-list", type=_nfe_list, default=None, metavar="CSV", help="NFE settings (default 1,2,4,8,16,32,64,128)")
    p.add_argument("--count", type=int, default=None, metavar="N", help="samples per context and setting (default 500)")
    p.add_argument("--contexts", type=int, default=None, metavar="N", help="held-out contexts (default 2)")
    p.add_argument("--timing", action="store_true", help="record wall time (makes reports run-dependent)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("two-stage", help="pretrain (TTS) -> adapt (dubbing) versus from-scratch", formatter_class=fmt)
    common(p)
    p.add_argument("--steps", type=int, default=None, metavar="N", help="steps for each stage (default 1000)")
    p.add_argument("--pretrain-steps", type=int, default=None, metavar="N", help="pretraining steps")
    p.add_argument("--adapt-steps", type=int, default=None, metavar="N", help="adaptation steps")
    p.add_argument("--lr", type=float, default=None, metavar="F", help="learning rate (default 0.5)")
    p.set_defaults(func=cmd_two_stage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        if args.threads < 1:
            raise CliError(EXIT_ARGS, f"--threads must be >= 1, got {args.threads}")
        if getattr(args, "seed", None) is None and args.command in ("sample",):
            args.seed = 0
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (DomainError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DubflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
