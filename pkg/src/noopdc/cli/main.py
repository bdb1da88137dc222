"""Command-line entry point: ``noopdc <stage> --config run.toml [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import config as cfgmod
from .pipeline import Run, run_experiment
from .report import MissingArtifactError, emit_report

# per-stage shortcut flags: (flag, config key, type)
SHORTCUTS = {
    "gen-data": [("--generator", "data.generator", str), ("--shots", "data.shots", int)],
    "train-denoiser": [("--epochs", "denoiser.epochs", int)],
    "eval-dc": [("--t", "dc.t", int)],
    "eval-ensemble": [("--noises", "dc.ensemble_noises", int)],
    "train-noop": [("--epochs", "noop.epochs", int), ("--batch-size", "noop.batch_size", int)],
    "train-prompt": [("--epochs", "prompt.epochs", int), ("--tokens", "prompt.n_tokens", int)],
    "transfer": [("--variant", "transfer.variant", str)],
    "spectra": [("--epochs", "spectra.epochs", int), ("--cutoff", "spectra.cutoff", float)],
    "stats": [("--draws", "stats.draws", int)],
    "probe": [("--t", "probe.t", int)],
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noopdc", description="Diffusion-classifier noise optimisation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ["run", *cfgmod.STAGES]:
        sp = sub.add_parser(name, help="all configured stages" if name == "run" else f"{name} stage")
        if name == "report":
            sp.add_argument("--run-dir", help="report on this directory instead of the configured run")
        sp.add_argument("--config", help="TOML config file (defaults used when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
        sp.add_argument("--runs-dir", help="output root (default $NOOP_RUNS_DIR or ./runs)")
        sp.add_argument("--name", help="run name")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--force", action="store_true", help="re-run even if up to date")
        sp.add_argument("-v", "--verbose", action="store_true")
        for flag, key, typ in SHORTCUTS.get(name, []):
            sp.add_argument(flag, type=typ, dest="short_" + key.replace(".", "__"), help=f"sets {key}")
    return p


def _config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    sets = list(args.set)
    if args.name is not None:
        sets.append(f"name={json.dumps(args.name)}")
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    for dest, value in vars(args).items():
        if dest.startswith("short_") and value is not None:
            key = dest[len("short_"):].replace("__", ".")
            sets.append(f"{key}={json.dumps(value)}")
    return cfgmod.apply_overrides(cfg, sets) if sets else cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report" and args.run_dir:
            rows = emit_report(args.run_dir)
            print((Path(args.run_dir) / "summary.txt").read_text(), end="")
            return 0 if rows else 1
        cfg = _config(args)
        if args.command == "run":
            art = run_experiment(cfg, root=args.runs_dir, force=args.force)
            print(json.dumps({"status": "ok", "run_dir": str(art.run_dir)}))
            return 0
        run = Run(cfg, args.runs_dir)
        run.write_config()
        run.run_stage(args.command, force=args.force)
        if args.command == "report":
            print(run.path("summary.txt").read_text(), end="")
        else:
            print(json.dumps({"status": "ok", "stage": args.command, "run_dir": str(run.dir)}))
        return 0
    except (cfgmod.ConfigError, MissingArtifactError, ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
