"""Command-line entry point: ``qkuramoto <subcommand> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from qkuramoto.experiments import (
    ConfigError,
    Experiment,
    ExperimentConfig,
    preset,
    run,
    run_bifurcation,
    run_clt_init,
    run_coupling_rate,
    run_custom,
    run_lln_rate,
    run_mv,
    run_ou,
    run_scaling,
    validate,
)

# subcommand -> (default preset, forced experiment kind or None, runner or None)
COMMANDS = {
    "simulate": (Experiment.CUSTOM, None, run_custom),
    "mv-solve": (Experiment.FIGURE1, None, run_mv),
    "fixed-point": (Experiment.BIFURCATION, Experiment.BIFURCATION, run_bifurcation),
    "fluct": (Experiment.CLT_INIT, Experiment.CLT_INIT, run_clt_init),
    "ou": (Experiment.OU_NULL, Experiment.OU_NULL, run_ou),
    "scaling": (Experiment.SCALING_STUDY, Experiment.SCALING_STUDY, run_scaling),
    "coupling-rate": (Experiment.COUPLING_RATE, Experiment.COUPLING_RATE, run_coupling_rate),
    "lln-rate": (Experiment.LLN_RATE, Experiment.LLN_RATE, run_lln_rate),
    "run": (Experiment.FIGURE1, None, None),
    "validate": (Experiment.FIGURE1, None, None),
}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkuramoto", description="Quenched Kuramoto simulations and mean-field checks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment configuration")
        s.add_argument("--preset", choices=[e.value for e in Experiment], help="start from a shipped preset")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--workers", type=int, help="worker processes for replica batches")
        s.add_argument("--seed", type=_u64, help="base seed for both the disorder and noise streams")
    pr = sub.add_parser("preset", help="print a preset configuration as JSON")
    pr.add_argument("name", choices=[e.value for e in Experiment])
    return p


def load_config(args) -> ExperimentConfig:
    default, forced, _ = COMMANDS[args.command]
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = preset(args.preset or default)
    if forced is not None:
        cfg = replace(cfg, experiment=forced)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg.with_seed_overrides(args.seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preset":
        print(preset(args.name).to_json())
        return 0
    try:
        cfg = load_config(args)
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as e:
        print(f"error: cannot load configuration: {e}", file=sys.stderr)
        return 2
    runner = COMMANDS[args.command][2]
    if args.command == "validate":
        violations = validate(cfg)
        for v in violations:
            print(v)
        if not violations:
            print("ok")
        return 1 if violations else 0
    try:
        manifest = run(cfg, runner)
    except ConfigError as e:
        for v in e.violations:
            print(v, file=sys.stderr)
        return 1
    except Exception as e:  # any module error makes the run fail
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"manifest_id": manifest.manifest_id, "outputs": manifest.outputs,
                      "out_dir": manifest.out_dir, "wall_time": round(manifest.wall_time, 3)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
