"""Command-line entry point: ``tsrelab <command> [options]``.

Exit codes: 0 success, 1 configuration or validation error, 2 numerical
failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import RunConfig
from .container import ContainerError
from .datagen import build_corpus, load_corpus, save_corpus
from .encoder import EncoderConfig, RetrievalModel
from .numcore import NumericalError
from .retrieval import PROTOCOLS, config_digest, evaluate, write_reports
from .trainer import (
    STAGES,
    Checkpoint,
    TrainConfig,
    TrainingAborted,
    TrainingError,
    model_from_checkpoint,
    train,
    write_log,
)
from .tsre import VARIANTS, TSREConfig, count_params

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _corpus(args, cfg: RunConfig, seed: int):
    if getattr(args, "corpus_dir", None):
        return load_corpus(args.corpus_dir)
    return build_corpus(cfg.data, seed)


# -- commands -------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.k is not None:
        cfg.data.k = args.k
        cfg.data.__post_init__()
    seed = cfg.resolve_seed(args.seed)
    corpus = build_corpus(cfg.data, seed)
    save_corpus(corpus, args.corpus_dir)
    rows = [(r["split"], r["images"], r["utterances"], r["speakers_per_utt"])
            for r in corpus.stats()]
    print(_table(rows, ("split", "images", "utterances", "speakers/utt")))
    print(f"wrote {args.corpus_dir} (k={cfg.data.k}, seed={seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    seed = cfg.resolve_seed(args.seed)
    tcfg = TrainConfig(**{**cfg.trainer.to_dict(), "stage": args.stage or cfg.trainer.stage})
    init = Checkpoint.load(args.init) if args.init else None
    resume = Checkpoint.load(args.resume) if args.resume else None
    tsre = None
    if tcfg.stage == "tsre-finetune":
        tsre = cfg.tsre or TSREConfig()
    model = RetrievalModel(cfg.encoder, seed, tsre=tsre, temperature=cfg.loss.temperature,
                           learnable_temperature=cfg.loss.learnable_temperature)
    corpus = _corpus(args, cfg, seed)

    def show(rec):
        if "val_s2i" in rec:
            print(f"step {rec['step']:>6}  loss {rec.get('loss', float('nan')):.4f}  "
                  f"val R@1 {rec['val_s2i'][1]:.3f}", flush=True)

    result = train(model, corpus, tcfg, cfg.loss, init=init, resume=resume,
                   on_log=None if args.quiet else show)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.final.save(out / "final.ckpt")
    result.best.save(out / "best.ckpt")
    write_log(result.history, out / "train_log.jsonl")
    print(f"best val R@1 {result.best.best_score:.3f} at step {result.best.best_step}; "
          f"checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if args.protocol == "single" and model.speech.has_tsre:
        print("note: evaluating the base encoder of an adapted checkpoint (adapter detached)")
        model.speech.detach_tsre()
    corpus = load_corpus(args.corpus_dir)
    reports = evaluate(model, corpus, args.split, args.protocol, digest=config_digest(ckpt.config))
    write_reports(reports, args.out)
    rows = [(r.direction, *(f"{r.recall[k]:.3f}" for k in sorted(r.recall)), r.n_queries)
            for r in reports]
    ks = sorted(reports[0].recall)
    print(_table(rows, ("direction", *(f"R@{k}" for k in ks), "queries")))
    for r in reports:
        for w in r.warnings:
            print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.paper_scale:
        enc = EncoderConfig.paper_scale()
    else:
        enc = RunConfig.load(args.config).encoder
    rows = []
    for v in args.variant or VARIANTS:
        n = count_params(enc, TSREConfig(v))
        rows.append((v, f"{n:,}", f"{n / 1e6:.2f}"))
    print(_table(rows, ("variant", "params", "millions")))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, run_suite

    cfg = RunConfig.load(args.config)
    seed = cfg.resolve_seed(args.seed)
    results = run_suite(seed)
    rows = [(r.group, f"{r.worst_rel_err:.2e}", r.n_checked, "ok" if r.passed() else "FAIL")
            for r in results]
    print(_table(rows, ("group", "max rel err", "entries", "status")))
    failed = [r for r in results if not r.passed()]
    print(f"{len(results) - len(failed)}/{len(results)} groups below {TOLERANCE:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_reproduce(args) -> int:
    from .experiment import DeskExperiment, run_experiment

    exp = DeskExperiment(seed=RunConfig().resolve_seed(args.seed))
    result = run_experiment(exp, out_dir=args.out, log=print)
    for line in result.summary_lines():
        print(line)
    return EXIT_OK if result.all_passed() else EXIT_CONFIG


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsrelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tsrelab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic mixture corpus")
    s.add_argument("--config")
    s.add_argument("--corpus-dir", required=True)
    s.add_argument("--k", type=int, choices=(1, 2, 3))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a base encoder or fine-tune a TSRE adapter")
    s.add_argument("--config")
    s.add_argument("--stage", choices=STAGES)
    s.add_argument("--init", help="base checkpoint to start fine-tuning from")
    s.add_argument("--resume", help="checkpoint of an interrupted run")
    s.add_argument("--corpus-dir", help="corpus on disk (default: synthesize from --config)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="recall@K of a checkpoint on a corpus split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus-dir", required=True)
    s.add_argument("--protocol", choices=PROTOCOLS, required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count-params", help="trainable TSRE parameter counts")
    s.add_argument("--variant", action="append", choices=VARIANTS)
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--config")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("reproduce", help="run the desk-scale mixture experiment end to end")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingAborted, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TrainingError, FileNotFoundError, ContainerError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
