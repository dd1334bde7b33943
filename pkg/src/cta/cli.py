"""Command line entry point: ``cta run``, ``cta sweep`` and ``cta prep``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .adaptor import DivergenceError


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    for assignment in getattr(args, "set", None) or []:
        cfg = harness.set_override(cfg, assignment)
    if getattr(args, "method", None):
        cfg.method = args.method
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output.dir = args.out
    return cfg.validate()


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = harness.run_and_write(cfg, trace_path=args.dump_trace)
    print(f"{cfg.method} seed={cfg.seed}: accuracy={summary.overall_accuracy:.4f} "
          f"backward={summary.total_backward}/{summary.total_forward} "
          f"({summary.steps_per_sec:.1f} steps/s) -> {cfg.output.dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = harness.parse_values(args.values)
    if not values:
        raise ValueError("--values needs at least one value")
    results = harness.run_sweep(cfg, args.param, values)
    harness.write_sweep_outputs(cfg.output.dir, args.param, results)
    for v, s in results:
        print(f"{args.param}={v}: accuracy={s.overall_accuracy:.4f} "
              f"backward_fraction={s.backward_fraction:.4f}")
    return 0


def cmd_prep(args) -> int:
    cfg = _load(args)
    path = harness.precompute_references(cfg, args.out_file)
    print(f"reference statistics written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cta", description="Continual test-time adaptation simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. adapt.lr=0.002")

    run = sub.add_parser("run", help="run one method over the configured scenario")
    common(run)
    run.add_argument("--method", help="direct | full | ours | ours-skip | evenly-skip-N")
    run.add_argument("--dump-trace", help="also write the generated scenes to this .npz file")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run one parameter over several values")
    common(sweep)
    sweep.add_argument("--method")
    sweep.add_argument("--param", required=True, choices=harness.SWEEP_PARAMS)
    sweep.add_argument("--values", required=True, help="comma separated, e.g. 1.0,1.1,inf")
    sweep.set_defaults(func=cmd_sweep)

    prep = sub.add_parser("prep", help="precompute reference statistics")
    common(prep)
    prep.add_argument("--out-file", help="statistics file (default: reference.path or <out>/reference.ctastats)")
    prep.set_defaults(func=cmd_prep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"cta: error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, FloatingPointError) as exc:
        print(f"cta: diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
