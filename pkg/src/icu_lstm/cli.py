"""Command line entry point: ``synth``, ``run``, ``score`` and ``predict``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import baselines as bl
from . import nn
from .data import SyntheticConfig, read_cohort, read_observations, write_synthetic
from .pipeline import MODELS, PipelineError, parse_config, predict_stages, run_experiment
from .preprocess import (FRAMES, apply_exclusions, group_observations, interpolate_linear,
                         prepare_grid, resample_to_grid)
from .report import emit_report, write_predictions


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icu-lstm",
                                     description="Two-stage ICU mortality / LOS experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, default=SyntheticConfig.n_stays)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mortality-rate", type=float, default=SyntheticConfig.mortality_rate)
    p.add_argument("--signal", type=float, default=SyntheticConfig.frame_signal_strength)
    p.add_argument("--missing-rate", type=float, default=SyntheticConfig.missing_rate)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run an experiment and write its report")
    p.add_argument("--config", help="flat key = value experiment file")
    p.add_argument("--frame", type=int, choices=FRAMES, action="append",
                   help="observation frame in hours (repeatable); overrides frame_hours")
    p.add_argument("--models", help=f"comma list from {','.join(MODELS)}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory; overrides out_dir")

    p = sub.add_parser("score", help="partial SAPS-II and SOFA for one stay")
    p.add_argument("--cohort", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--stay-id", required=True)
    p.add_argument("--frame", type=int, choices=FRAMES, default=24)

    p = sub.add_parser("predict", help="two-stage predictions from saved models")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--frame", type=int, choices=FRAMES, required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--out", help="CSV destination (default: stdout)")
    return parser


def _cmd_synth(args):
    cfg = SyntheticConfig(n_stays=args.n, mortality_rate=args.mortality_rate,
                          frame_signal_strength=args.signal, missing_rate=args.missing_rate,
                          seed=args.seed)
    for name, path in write_synthetic(cfg, args.out).items():
        print(f"{name}: {path}")
    return 0


def _cmd_run(args):
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = {
        "frame_hours": ",".join(map(str, args.frame)) if args.frame else None,
        "models": args.models,
        "epochs": args.epochs,
        "seed": args.seed,
        "out_dir": args.out,
    }
    try:
        cfg = parse_config(text, overrides)
    except ValueError as e:
        print(f"icu-lstm run: invalid configuration: {e}", file=sys.stderr)
        return 2
    result = run_experiment(cfg)
    written = emit_report(result, cfg.out_dir)
    for row in result.report["binary"]:
        t = row["test"]
        print(f"{row['model']:>6} {row['frame_hours']:>2} h  F1 {t['f1']:.3f}  MCC {t['mcc']:.3f}")
    print(f"report: {written['report']}")
    return 0


def _load_stay_grids(cohort_path, obs_path, frame):
    cohort = read_cohort(cohort_path)
    by_stay = group_observations(read_observations(obs_path))
    return cohort, {e.stay_id: interpolate_linear(resample_to_grid(by_stay.get(e.stay_id, []),
                                                                   frame, e.stay_id))
                    for e in cohort}


def _cmd_score(args):
    cohort, grids = _load_stay_grids(args.cohort, args.observations, args.frame)
    entry = next((e for e in cohort if e.stay_id == args.stay_id), None)
    if entry is None:
        raise ValueError(f"stay {args.stay_id!r} not in cohort")
    grid = grids[entry.stay_id]
    out = {"stay_id": entry.stay_id, "frame_hours": args.frame,
           "saps2": asdict(bl.saps2_score(grid, entry.age_years)),
           "sofa": asdict(bl.sofa_score(grid))}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_predict(args):
    model_dir = Path(args.model_dir)
    m1 = nn.load_model(model_dir / f"mortality_{args.frame}.json")
    los_path = model_dir / f"los_{args.frame}.json"
    m2 = nn.load_model(los_path) if los_path.exists() else None
    cohort, grids = _load_stay_grids(args.cohort, args.observations, args.frame)
    kept = apply_exclusions(cohort)
    prepared = [prepare_grid(grids[e.stay_id], m1.stats) for e in kept]
    los_prepared = None if m2 is None else [prepare_grid(grids[e.stay_id], m2.stats)
                                            for e in kept]
    preds = predict_stages(m1, m2, prepared, los_prepared)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            write_predictions(preds, f)
    else:
        write_predictions(preds, sys.stdout)
    if len(kept) < len(cohort):
        print(f"{len(cohort) - len(kept)} stays excluded (age/LOS criteria)", file=sys.stderr)
    return 0


COMMANDS = {"synth": _cmd_synth, "run": _cmd_run, "score": _cmd_score, "predict": _cmd_predict}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PipelineError, ValueError, OSError, RuntimeError) as e:
        print(f"icu-lstm {args.command}: error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())
