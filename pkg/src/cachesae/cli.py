"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numeric error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import EXPERIMENTS, ExperimentConfig, load_config
from .errors import CacheSAEError, ConfigError, NumericError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAGE = 0, 2, 3, 4

_STEER_PARTS = ("erase", "install", "sign", "generate", "amplify")


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import torch
        torch.set_num_threads(n)
    except ImportError:      # pragma: no cover - torch is a dependency
        pass


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cachesae",
                                 description="Rank-1 dictionaries over recurrent cache writes.")
    ap.add_argument("--threads", type=int, default=1, help="worker/thread cap (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment JSON")
        p.add_argument("--out", help="run directory (default: config output)")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan")
        return p

    add("train-host", "train the toy host")
    p = add("capture", "capture the cell's states to a WSAE file")
    p.add_argument("--capture-out", help="also copy the WSAE file here")
    add("train-sae", "train the dictionary")
    add("partition", "atom geometry and register/bundle classes")
    add("replace", "replacement test (atom vs delete vs random)")
    add("predict", "logit-change prediction fits")
    p = add("steer", "cache interventions")
    p.add_argument("part", choices=_STEER_PARTS + ("all",), nargs="?", default="all")
    p.add_argument("--dose", type=float, action="append", help="dose (repeatable)")
    p.add_argument("--positions", type=int, help="edited cache positions")
    p.add_argument("--horizon", type=int, help="greedy decoding horizon")
    add("report", "summary, figures and manifest")
    p = add("run", "full pipeline")
    p.add_argument("--experiment", choices=EXPERIMENTS, help="run one experiment only")
    a = sub.add_parser("audit", help="recompute summary numbers from the JSONL records")
    a.add_argument("run_dir")
    return ap


def _with_steer_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    d = cfg.to_dict()
    st = d["experiments"].setdefault("steer", {})
    if args.dose:
        key = "amplify_doses" if args.part == "amplify" else "doses"
        st[key] = list(args.dose)
    if args.positions is not None:
        st["positions"] = args.positions
    if args.horizon is not None:
        st["horizon"] = args.horizon
    return ExperimentConfig.from_dict(d)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _set_threads(max(1, args.threads))

    from . import pipeline
    from .report import audit

    if args.command == "audit":
        bad = audit(args.run_dir)
        for line in bad:
            print(f"MISMATCH {line}")
        print("audit ok" if not bad else f"audit failed: {len(bad)} mismatches")
        return EXIT_OK if not bad else EXIT_STAGE

    try:
        cfg = load_config(args.config)
        if args.command == "steer":
            cfg = _with_steer_overrides(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out or cfg.output)
    if args.command == "run":
        stages = pipeline.stage_plan(cfg, args.experiment)
    elif args.command == "steer" and "steer" not in cfg.experiments:
        stages = ["steer"]
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "experiments": {
            **cfg.to_dict()["experiments"], "steer": {}}})
    else:
        stages = [args.command]

    if args.dry_run:
        print(json.dumps({"config_hash": cfg.config_hash(), "output": str(out), "stages": stages},
                         indent=2))
        return EXIT_OK

    try:
        if args.command == "run":
            man = pipeline.run_pipeline(cfg, out, args.experiment)
            print(f"wrote {len(man['artifacts'])} artifacts to {out}")
        else:
            run = pipeline.Run(cfg, out)
            if args.command == "steer" and args.part != "all":
                run.steer_parts = (args.part,)
            pipeline.run_stage(run, stages[0])
            if args.command == "capture" and args.capture_out:
                Path(args.capture_out).write_bytes(run.path("capture.wsae").read_bytes())
            if args.command == "report":
                pipeline.write_manifest(run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, pipeline.NumericStageError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.StageError, CacheSAEError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"error: missing input {exc.filename}; run the earlier stages first", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
