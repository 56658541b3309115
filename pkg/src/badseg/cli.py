"""Command-line entry point: ``badseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import config as cfgmod
from .data import SyntheticConfig, make_synthetic, save_dataset, synthetic_taxonomy

log = logging.getLogger("badseg")


def _load_config(path: str):
    """A config file, or a run record (whose snapshot is re-executable)."""
    p = Path(path)
    if p.is_dir():
        p = p / "record.json"
    if p.suffix == ".json":
        return cfgmod.ExperimentConfig.from_dict(json.loads(p.read_text())["config"])
    return cfgmod.load(p)


def cmd_validate(args) -> int:
    try:
        diags = cfgmod.validate(args.config)
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    for d in diags:
        print(d)
    ok = cfgmod.is_valid(diags)
    print("valid" if ok else "invalid")
    return 0 if ok else 1


def cmd_run(args) -> int:
    from .pipeline import run

    config = _load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    record = run(config)
    print(json.dumps({"status": record.status, "artifacts": record.artifacts}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    from .pipeline import sweep
    from .report import sweep_report

    config = _load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    result = sweep(config)
    print(sweep_report(result.run_dir))
    return 0


def cmd_report(args) -> int:
    from .report import report

    print(report(args.run_dir))
    return 0


def cmd_defend(args) -> int:
    from .pipeline import RunRecord, defend

    entries = None
    if args.defense:
        defaults = cfgmod.DEFENSE_DEFAULTS
        unknown = [n for n in args.defense if n not in defaults]
        if unknown:
            print(f"error: unknown defenses {unknown}", file=sys.stderr)
            return 2
        configured = {d["name"]: d for d in RunRecord.load(args.run_dir).config.get("defenses", [])}
        entries = [configured.get(n, {"name": n, **defaults[n]}) for n in args.defense]
    record = defend(args.run_dir, entries)
    print(json.dumps({k: v for k, v in record.artifacts.items() if k.startswith("defense_")}, indent=2))
    return 0


def cmd_make_synthetic(args) -> int:
    cfg = SyntheticConfig(args.n, args.height, args.width, args.classes, args.seed, args.prefix)
    samples = make_synthetic(cfg)
    save_dataset(samples, args.out, synthetic_taxonomy(args.classes))
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_rank_pairs(args) -> int:
    from .pipeline import rank_pairs

    config = _load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    path = rank_pairs(config)
    print(path.read_text(), end="")
    return 0


def cmd_optimize_trigger(args) -> int:
    from .pipeline import optimize_trigger

    config = _load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    spec = optimize_trigger(config)
    print(yaml.safe_dump({"fixed": spec.to_dict()}, sort_keys=False), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="badseg", description="Backdoor attacks on semantic segmentation at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")
    p.set_defaults(fn=cmd_validate)

    for name, fn, help_ in (
        ("run", cmd_run, "run one experiment"),
        ("sweep", cmd_sweep, "run every child of a sweep config"),
        ("rank-pairs", cmd_rank_pairs, "rank victim-target pairs by surrogate class-center distance"),
        ("optimize-trigger", cmd_optimize_trigger, "search trigger attributes on a surrogate"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="config YAML, or a run directory / record.json to re-execute")
        p.add_argument("-o", "--output-dir", help="override the run directory")
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="render summary, overlays and score densities of a run")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("defend", help="run defenses against a finished run")
    p.add_argument("run_dir")
    p.add_argument("-d", "--defense", action="append", help="defense name (repeatable); default: the configured list")
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("make-synthetic", help="write a synthetic dataset as PNG images and labels")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="syn")
    p.set_defaults(fn=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    from .pipeline import StageError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (cfgmod.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
