"""Command-line entry point.

Subcommands: make-data, build-rq, pretrain, index, eval, report.  A run
directory plus one config file determines everything; stdout carries
human-readable progress only, all machine-readable output goes to files.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import read_corpora, read_documents, read_queries
from .decoding import DocIdTrie, batch_constrained_beam_search
from .experiment import (
    ExperimentRunner,
    Manifest,
    embed_corpus,
    evaluate_checkpoint,
    write_report,
)
from .metrics import mrr_at_k, recall_at_k
from .rq import load_codebooks, load_docid_table
from .training import NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def build_parser():
    p = _Parser(prog="cldsi", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config YAML")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="restart instead of refusing on conflicts")
        sp.add_argument("--resume", action="store_true", help="explicitly allow resuming (default on)")

    sp = sub.add_parser("make-data", help="generate the synthetic dynamic corpora")
    common(sp)

    sp = sub.add_parser("build-rq", help="embed D0, train codebooks, assign docids")
    common(sp)
    sp.add_argument("--m", type=int, default=None, help="override codebook count M")
    sp.add_argument("--k", type=int, default=None, help="override centroids per codebook K")

    sp = sub.add_parser("pretrain", help="pretrain on the initial snapshot")
    common(sp)

    sp = sub.add_parser("index", help="continually index one snapshot")
    common(sp)
    sp.add_argument("--snapshot", type=int, required=True, help="snapshot index t >= 1")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a query file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--queries", required=True, help="queries JSONL")
    sp.add_argument("--docids", required=True, help="docid table TSV")
    sp.add_argument("--out", required=True, help="output CSV")
    sp.add_argument("--snapshot-index", type=int, default=None, help="i column for the CSV")
    sp.add_argument("--beam", type=int, default=10)
    sp.add_argument("--topk", type=int, default=10)

    sp = sub.add_parser("report", help="write CL summary / OOD / routing reports")
    sp.add_argument("--out", required=True, help="run directory")
    return p


def _runner(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.seed = args.seed
    return ExperimentRunner(cfg, args.out, force=args.force)


def cmd_make_data(args):
    runner = _runner(args)
    if runner.manifest.done("data") and not args.force:
        print(f"data already generated in {args.out} (resume)")
        return
    runner.stage_data()
    print(f"wrote corpora under {os.path.join(args.out, 'data')}")


def cmd_build_rq(args):
    runner = _runner(args)
    if args.m is not None:
        runner.cfg.rq.M = args.m
    if args.k is not None:
        runner.cfg.rq.K = args.k
    for stage in ("data", "rq"):
        if runner.manifest.done(stage):
            print(f"[{stage}] already complete, resuming past it")
            continue
        getattr(runner, f"stage_{stage}")()
        print(f"[{stage}] done")
    info = load_docid_table(runner.p("rq", "docids_t0.tsv"))
    print(f"codebooks + {len(info)} docids under {runner.p('rq')}")


def cmd_pretrain(args):
    runner = _runner(args)
    runner.run(stop_after="pretrain", progress=print)
    print(f"pretrained checkpoint: {runner.p('ckpt', 'model_t0.bin')}")


def cmd_index(args):
    runner = _runner(args)
    t = args.snapshot
    if not 1 <= t <= runner.cfg.data.snapshots:
        raise UsageError(f"snapshot must lie in [1, {runner.cfg.data.snapshots}]")
    runner.run(stop_after=f"session_{t}", progress=print)
    print(f"indexed snapshot {t}: {runner.p('ckpt', f'model_t{t}.bin')}")


def cmd_eval(args):
    import csv

    model = load_checkpoint(args.ckpt)
    table = load_docid_table(args.docids)
    queries = read_queries(args.queries)
    trie = DocIdTrie(table.values())
    by_codes = {tuple(v): k for k, v in table.items()}
    recs, mrrs = [], []
    for i in range(0, len(queries), 128):
        part = queries[i : i + 128]
        hyp_lists = batch_constrained_beam_search(
            [q.tokens for q in part], model, trie, beam=args.beam, k=args.topk
        )
        for q, hyps in zip(part, hyp_lists):
            ranked = [by_codes[c] for c, _ in hyps]
            recs.append(recall_at_k(ranked, q.gold, args.topk))
            mrrs.append(mrr_at_k(ranked, q.gold, args.topk))
    i_col = "" if args.snapshot_index is None else args.snapshot_index
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "t", "i", "value"])
        w.writerow([f"R@{args.topk}", model.timestep, i_col, repr(float(np.mean(recs)))])
        w.writerow([f"MRR@{args.topk}", model.timestep, i_col, repr(float(np.mean(mrrs)))])
    print(f"evaluated {len(queries)} queries -> {args.out}")


def cmd_report(args):
    if not os.path.isdir(os.path.join(args.out, "reports")):
        raise FileNotFoundError(f"{args.out} has no reports/ directory")
    write_report(args.out)
    print(f"reports written under {os.path.join(args.out, 'reports')}")


HANDLERS = {
    "make-data": cmd_make_data,
    "build-rq": cmd_build_rq,
    "pretrain": cmd_pretrain,
    "index": cmd_index,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        HANDLERS[args.command](args)
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
