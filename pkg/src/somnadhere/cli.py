"""``somnadhere`` command line: synth | preprocess | pretrain | train | predict | eval | interpret | report | selftest.

All subcommands share ``--config --out [--seed] [--threads] [--preset]`` and
work inside one output directory::

    out/manifest.json            run manifest (seeds, versions, artifact hashes, timings)
    out/cohort/                  synthetic cohort (manifest.ndjson + signal files)
    out/qc_log.json              nights excluded by the sleep-duration filter
    out/cache/                   preprocessed token features and EEG targets
    out/folds.json               participant-level fold plan
    out/checkpoints/             fold{i}.pretrain.somn, fold{i}.somn
    out/logs/                    pretrain.ndjson, train.ndjson
    out/predictions.csv          cross-validated night scores
    out/predictions_holdout.csv  hold-out night scores (mean over fold models)
    out/eval/                    eval.json, subgroups.csv, baseline predictions
    out/interpret/               spectra, REM correlations, latent projection, trajectories
    out/report/                  report.json and SVG figures

Exit codes: 0 success, 64 usage error, 65 bad config, 70 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 64, 65, 70
SUBCOMMANDS = ("synth", "preprocess", "pretrain", "train", "predict", "eval", "interpret", "report", "selftest")
LOG_LEVELS = {"error": "ERROR", "warn": "WARNING", "info": "INFO", "debug": "DEBUG"}
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="somnadhere", description="Antidepressant detection from nocturnal respiration.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config with optional sections "
                       "synth, train, folds, qc, eval, interpret")
        s.add_argument("--out", required=name != "selftest", help="output directory")
        s.add_argument("--seed", type=int, help="override every seed (cohort, folds, train, eval)")
        s.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker processes for fold-parallel stages (default: logical cores)")
        s.add_argument("--preset", choices=("tiny", "desk", "paper"), default="desk")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.threads < 1:
        print("somnadhere: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    # one BLAS thread per process: results do not depend on --threads
    for var in _BLAS_VARS:
        os.environ.setdefault(var, "1")
    import logging
    level = LOG_LEVELS.get(os.environ.get("SOMNADHERE_LOG", "warn").lower(), "WARNING")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from . import workflow
    try:
        cfg = workflow.load_run_config(args.config, preset=args.preset, seed=args.seed)
    except workflow.RunConfigError as e:
        print(f"somnadhere: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        workflow.run_stage(args.command, cfg, args.out, threads=args.threads, config_path=args.config)
    except workflow.StageFailure as e:
        print(f"somnadhere: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # categorized as a runtime failure, details in the log
        logging.getLogger("somnadhere").debug("traceback", exc_info=True)
        print(f"somnadhere: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
