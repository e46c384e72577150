"""Command-line entry point: ``bimu run|eval-ood|hist|mem|validate``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace

from .posterior import CheckpointError, load_checkpoint
from .rules import METHODS, training_state_bytes
from .runner import ConfigError, eval_ood_checkpoint, histogram_rows, load_config, run_experiment
from .streams import DataFormatError


def _parser() -> argparse.ArgumentParser:
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, help="override the config's seed")

    p = argparse.ArgumentParser(prog="bimu", description="Bayesian binary continual learning experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[seeded], help="run an experiment and write its result files")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override the config's output_dir")

    o = sub.add_parser("eval-ood", parents=[seeded], help="OOD ROC-AUC of a saved posterior")
    o.add_argument("checkpoint")
    o.add_argument("config")

    h = sub.add_parser("hist", help="histogram of p(w=+1) of a saved posterior, as CSV")
    h.add_argument("checkpoint")
    h.add_argument("--bins", type=int, default=20)

    m = sub.add_parser("mem", parents=[seeded], help="persistent training-state memory")
    m.add_argument("config")
    m.add_argument("--all", action="store_true", help="report every method for the config's network")

    v = sub.add_parser("validate", parents=[seeded], help="check a config and its data files")
    v.add_argument("config")
    return p


def _mem_line(method: str, n_bytes: int) -> str:
    return f"{method}\t{n_bytes} bytes\t{n_bytes / 1e6:.2f} MB"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.seed)
            if args.output_dir:
                cfg = replace(cfg, output_dir=args.output_dir)
            res = run_experiment(cfg)
            summary = {k: res.results.get(k) for k in ("method", "n_events", "n_updates", "query_rate",
                                                        "mean_last_k", "mmrr", "bwt", "ood_auc")}
            print(json.dumps(summary, sort_keys=True))
            print(f"results written to {res.output_dir}")
        elif args.command == "eval-ood":
            cfg = load_config(args.config, args.seed)
            for kind, auc in eval_ood_checkpoint(args.checkpoint, cfg).items():
                print(f"{kind}\t{auc:.6f}")
        elif args.command == "hist":
            post = load_checkpoint(args.checkpoint)
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(("p_low", "p_high", "count"))
            for lo, hi, c in histogram_rows(post, args.bins):
                w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
        elif args.command == "mem":
            cfg = load_config(args.config, args.seed, check_files=False)
            spec = cfg.network.spec()
            for method in METHODS if args.all else (cfg.method,):
                print(_mem_line(method, training_state_bytes(method, spec)))
        elif args.command == "validate":
            load_config(args.config, args.seed)
            print("ok")
    except (ConfigError, CheckpointError, DataFormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"bimu {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
