import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from errors import FairTransError
from experiment import (
    PHASES,
    ExperimentConfig,
    compare,
    load_config,
    resolve_out,
    run_experiment,
    seed_sweep,
)
from faireval import delta_markdown

LOG_LEVELS = ["critical", "error", "warning", "info", "debug"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_STDV_NOT_REDUCED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_env():
    # Load .env file
    load_dotenv()

    return {
        "log_level": os.getenv("LOG_LEVEL", "info").lower(),
    }


def build_parser(env) -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fairtrans",
        description="Synthetic-data bias mitigation by cross-group translation",
    )
    parser.add_argument(
        "--config", help="Experiment config file ([section] key = value)"
    )
    parser.add_argument("--out", help="Output directory (default: $FAIRTRANS_OUT)")
    parser.add_argument("--seed", type=int, help="Global seed, overrides the config")
    parser.add_argument(
        "--quiet", action="store_true", help="Only log warnings and errors"
    )
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        default=env["log_level"] if env["log_level"] in LOG_LEVELS else "info",
        help="Set logging level",
    )

    commands = parser.add_subparsers(dest="command", required=True)
    for phase in PHASES:
        sub = commands.add_parser(phase, help=f"Run the {phase} phase only")
        sub.add_argument(
            "--force", action="store_true", help="Rerun even if up to date"
        )
    run = commands.add_parser("run", help="Run the full pipeline")
    run.add_argument("--force", action="store_true", help="Rerun every phase")

    cmp = commands.add_parser(
        "compare", help="Compare baseline and treated report directories"
    )
    cmp.add_argument("baseline")
    cmp.add_argument("treated")

    sweep = commands.add_parser(
        "sweep", help="Baseline vs treated runs over several seeds"
    )
    sweep.add_argument("--seeds", type=int, nargs="+", required=True)
    return parser


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def dispatch(args) -> int:
    if args.command == "compare":
        deltas, code = compare(args.baseline, args.treated, args.out)
        print(delta_markdown(deltas), end="")
        if code == EXIT_STDV_NOT_REDUCED:
            verdict = "STDV did not decrease"
        else:
            verdict = "STDV decreased or unchanged"
        print(f"Verdict: {verdict}")
        return code

    config = _config(args).with_overrides(seed=args.seed)
    if args.command == "sweep":
        rows = seed_sweep(config, args.seeds, args.out)
        for row in rows:
            if row[0] == "median":
                print(f"median ΔSTDV {row[1]}: {row[-1]}")
        return EXIT_OK

    phases = PHASES if args.command == "run" else (args.command,)
    out_dir = resolve_out(config, args.out)
    manifest = run_experiment(config, out=out_dir, phases=phases, resume=not args.force)
    print(f"Output: {out_dir}")
    print(f"Seed: {manifest.seed}")
    for phase, record in manifest.phases.items():
        print(f"  {phase}: {len(record.files)} files, {record.seconds:.1f}s")
    summary = out_dir / "reports" / "summary.md"
    if args.command in ("run", "eval") and summary.exists():
        print(summary.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    env = load_env()
    args = build_parser(env).parse_args(argv)

    level = "warning" if args.quiet else args.log_level
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return dispatch(args)
    except FairTransError as e:
        logging.getLogger("fairtrans").error("%s", e.message)
        return e.exit_code
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception:
        logging.getLogger("fairtrans").exception("Unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
