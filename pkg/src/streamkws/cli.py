"""Command-line entry point: ``streamkws <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure,
4 ``stream`` finished in the cancelled state.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .attention import AttentionProjections, BlockSpec, build_mask, equivalence_report
from .evaluation import BENCH_HEADER, det_csv, evaluate_ftm, evaluate_vtd, run_bench
from .exceptions import FormatError, NumericError, SessionError, ShapeError
from .model import ModelConfig, init_params, load_checkpoint, parse_key_values, save_checkpoint
from .runtime import StreamingSession, Verdict
from .tensor import Rng
from .training import TrainConfig, gradcheck, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CANCELLED = 0, 1, 2, 3, 4

log = logging.getLogger("streamkws")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    return parse_key_values(Path(path).read_text(encoding="utf-8"))


def _split_config(values: dict):
    """Partition a key=value mapping into model, training and corpus settings."""
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    corpus_keys = set(data_mod.CorpusSpec.__dataclass_fields__)
    unknown = set(values) - model_keys - train_keys - corpus_keys
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    pick = lambda keys: {k: v for k, v in values.items() if k in keys}  # noqa: E731
    return pick(model_keys), pick(train_keys), pick(corpus_keys)


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def cmd_gen(args) -> int:
    _, _, corpus_vals = _split_config(_load_config_file(args.config))
    corpus_vals.update(_overrides(args, ["n_true", "n_confusable", "n_negative", "divergence"]))
    if args.seed is not None:
        corpus_vals["seed"] = args.seed
    spec = data_mod.CorpusSpec.from_mapping(corpus_vals)
    corpus = data_mod.generate_corpus(spec)
    data_mod.write_corpus(corpus, spec, args.out)
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} utterances to {args.out}")
    return EXIT_OK


def _model_config_from(args, base: dict, corpus_spec=None) -> ModelConfig:
    values = dict(base)
    if corpus_spec is not None:
        values.setdefault("feature_dim", corpus_spec.feature_dim)
        values.setdefault("vocab_size", corpus_spec.vocab_size)
    values.update(_overrides(args, ["shift", "phrase_loss", "precision"]))
    if getattr(args, "no_lstm", False):
        values["lstm_in_phrase_branch"] = False
    return ModelConfig.from_mapping(values)


def cmd_train(args) -> int:
    model_vals, train_vals, _ = _split_config(_load_config_file(args.config))
    spec = data_mod.read_corpus_spec(args.data)
    config = _model_config_from(args, model_vals, spec)
    train_vals.update(_overrides(args, ["epochs", "lr", "batch_size", "seed"]))
    tc = TrainConfig.from_mapping(train_vals)
    train_set = data_mod.read_split(args.data, "train", config.vocab_size)
    dev_set = data_mod.read_split(args.data, "dev", config.vocab_size)
    result = train(config, train_set, train_config=tc, dev=dev_set, log_path=args.metrics)
    save_checkpoint(result.params, config, args.out)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"epoch {last.epoch}: ctc={last.ctc_loss:.4f} phrase={last.phrase_loss:.4f} "
              f"dev_acc={last.phrase_acc:.4f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _load_model(args):
    params, config = load_checkpoint(args.checkpoint, args.precision)
    return params, config


def cmd_eval(args) -> int:
    if args.post_trigger_frames < 0:
        raise UsageError("--post-trigger-frames must be >= 0")
    params, config = _load_model(args)
    spec = data_mod.read_corpus_spec(args.data)
    utts = data_mod.read_split(args.data, args.split, config.vocab_size)
    res = evaluate_ftm(params, config, utts, args.post_trigger_frames)
    text = det_csv(res.points)
    if args.det_out:
        Path(args.det_out).write_text(text)
    else:
        sys.stdout.write(text)
    vtd = evaluate_vtd(params, config, utts, spec.trigger)
    print(f"post_trigger_frames={args.post_trigger_frames} ftr_at_frr_1pct={res.ftr_at_1pct:.6f} "
          f"vtd_frr={vtd.frr:.6f} vtd_false_alarm_rate={vtd.false_alarm_rate:.6f} "
          f"n_target={vtd.n_target} n_nontarget={vtd.n_nontarget}",
          file=sys.stderr if not args.det_out else sys.stdout)
    return EXIT_OK


def cmd_stream(args) -> int:
    params, config = _load_model(args)
    features = data_mod.read_features(args.features)
    session = StreamingSession(params, config, args.threshold, args.trigger_frame)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["frame_idx", "phrase_pos_prob", "smoothed_score", "verdict"])
    chunk = max(1, args.chunk)

    def emit(emissions):
        for e in emissions:
            d = e.decision
            writer.writerow([e.frame, f"{d.raw_prob:.6f}", f"{d.smoothed:.6f}", d.verdict.value])

    for a in range(0, features.shape[0], chunk):
        emit(session.push(features[a:a + chunk]))
    emit(session.finish())
    return EXIT_CANCELLED if session.decision.verdict is Verdict.CANCELLED else EXIT_OK


def cmd_bench(args) -> int:
    params, config = _load_model(args)
    if not config.streaming:
        config = config.replace(shift=args.shift)
    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else \
        [10 * config.shift, 100 * config.shift]
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        rows = run_bench(params, config, lengths, args.repeats, args.seed or 0)
    text = BENCH_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_mask(args) -> int:
    if args.shift < 1 or args.frames < 1:
        raise UsageError("--shift and --frames must be >= 1")
    spec = BlockSpec(args.shift)
    print(build_mask(args.frames, spec).to_text())
    rng = Rng(args.seed or 0)
    d, heads = args.d_model, args.heads
    ws = [rng.normal(scale=1 / np.sqrt(d), size=(d, d)) for _ in range(4)]
    proj = AttentionProjections(*ws, n_heads=heads)
    diff = equivalence_report(rng.normal(size=(args.frames, d)), proj, spec)
    print(f"max_abs_diff={diff:.3e}")
    return EXIT_OK if diff < 1e-10 else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    model_vals, _, _ = _split_config(_load_config_file(args.config))
    config = _model_config_from(args, model_vals)
    report = gradcheck(config, args.seed or 0, max_entries=args.max_entries)
    print("tensor,max_rel_err,status")
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--config", default=None, help="key=value config file")
    shared.add_argument("--precision", choices=("f32", "f64"), default=None)

    parser = _Parser(prog="streamkws", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[shared], help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-true", dest="n_true", type=int)
    p.add_argument("--n-confusable", dest="n_confusable", type=int)
    p.add_argument("--n-negative", dest="n_negative", type=int)
    p.add_argument("--divergence", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[shared], help="train on a generated corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="per-epoch CSV log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--shift", type=int, help="block shift S (0 = vanilla attention)")
    p.add_argument("--phrase-loss", dest="phrase_loss", choices=("frame_ce", "ctc_seq"))
    p.add_argument("--no-lstm", dest="no_lstm", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="DET curve of the phrase branch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=data_mod.SPLITS)
    p.add_argument("--post-trigger-frames", dest="post_trigger_frames", type=int, required=True)
    p.add_argument("--det-out", dest="det_out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", parents=[shared], help="streaming inference over one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--trigger-frame", dest="trigger_frame", type=int, default=0)
    p.add_argument("--chunk", type=int, default=1, help="frames per push")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", parents=[shared], help="full-pass vs streaming timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lengths", default=None, help="comma-separated frame counts (default 10S,100S)")
    p.add_argument("--repeats", type=int, default=15)
    p.add_argument("--shift", type=int, default=8, help="shift used when the checkpoint is vanilla")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mask", parents=[shared], help="print a block mask and check equivalence")
    p.add_argument("--shift", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--d-model", dest="d_model", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient check")
    p.add_argument("--max-entries", dest="max_entries", type=int, default=64,
                   help="entries checked per tensor (0 = all)")
    p.add_argument("--shift", type=int)
    p.add_argument("--phrase-loss", dest="phrase_loss", choices=("frame_ce", "ctc_seq"))
    p.add_argument("--no-lstm", dest="no_lstm", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "max_entries", None) == 0:
        args.max_entries = None
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"streamkws: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"streamkws: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, SessionError, ValueError, OSError) as exc:
        print(f"streamkws: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
