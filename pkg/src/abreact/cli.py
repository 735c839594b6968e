"""Command-line front end: ``abreact <subcommand> [--config PATH] [--seed N] ...``.

Exit codes: 0 pass, 1 acceptance failure, 2 configuration error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (
    KINDS,
    ConfigError,
    ExperimentConfig,
    acceptance_suite,
    default_config,
    run_experiment,
    write_bundle,
)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abreact", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--threads", type=int, help="replica worker processes")
        sp.add_argument("--out", type=Path, help="output directory for the report bundle")
        sp.add_argument("--format", choices=("csv", "json"), default="json",
                        help="what to print on stdout")

    for kind in KINDS:
        common(sub.add_parser(kind, help=f"run a {kind} experiment"))
    acc = sub.add_parser("accept", help="run the acceptance suite")
    common(acc)
    acc.add_argument("--suite", default="fast", help="'fast' (default) or 'all'")
    sub.add_parser("show-config", help="print the default config of a kind").add_argument(
        "kind", choices=KINDS)
    return p


def _load(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = ExperimentConfig.from_text(text)
        if cfg.kind != args.command:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}")
    else:
        cfg = default_config(args.command)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["out"] = str(args.out)
    return cfg.replace(**changes).validate() if changes else cfg.validate()


def _accept(args) -> int:
    seed = args.seed if args.seed is not None else 20240611
    verdicts = acceptance_suite(args.suite, seed=seed, threads=args.threads,
                                progress=lambda v: print(v.line(), file=sys.stderr, flush=True))
    doc = {"suite": args.suite, "seed": seed,
           "criteria": [v.to_dict() for v in verdicts],
           "passed": all(v.passed for v in verdicts)}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "acceptance.json").write_text(text)
    if args.format == "json":
        sys.stdout.write(text)
    else:
        print("criterion,title,passed,wall_time")
        for v in verdicts:
            print(f"{v.number},{v.title},{str(v.passed).lower()},{v.wall_time!r}")
    return EXIT_PASS if doc["passed"] else EXIT_FAIL


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "show-config":
            sys.stdout.write(default_config(args.kind).to_text())
            return EXIT_PASS
        if args.command == "accept":
            return _accept(args)
        cfg = _load(args)
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime faults: audits, replica failures, numerics
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT
    if cfg.out:
        write_bundle(result, cfg.out)
    if args.format == "json":
        sys.stdout.write(result.to_json())
    else:
        for name, table in result.tables.items():
            sys.stdout.write(f"# {name}\n{table}")
    sys.stderr.write(result.summary())
    return EXIT_PASS if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
