import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import LabError
from .experiments import replay_row, run_experiment
from .models import ExperimentConfig
from .reports import write_replay, write_run
from .settings import get_settings

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paralab", description="Run paraproduct and Leibniz experiments.")
    commands = parser.add_subparsers(dest="command", required=True)
    run = commands.add_parser("run", help="run the experiment described by a TOML config")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, default=None, help="output directory (default: output.out_dir)")
    run.add_argument("--replay", nargs=2, metavar=("EXPERIMENT", "ROW"), default=None,
                     help="recompute a single table row")
    run.add_argument("--seed-override", type=int, default=None)
    run.add_argument("--threads", type=int, default=None)
    return parser


def _configure_logging() -> None:
    level = getattr(logging, get_settings().log_level, logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def run(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seed_override is not None:
        if not 0 <= args.seed_override < 2 ** 64:
            raise LabError("--seed-override must be an unsigned 64-bit integer")
        config = config.with_seed(args.seed_override)
    out_dir = args.out if args.out is not None else config.resolve(config.output.out_dir)

    if args.replay is not None:
        experiment, row = args.replay
        try:
            row_id = int(row)
        except ValueError:
            raise LabError(f"row id must be an integer, got {row!r}")
        print(f"🔁 Replaying {experiment} row {row_id} of {config.name}")
        values = replay_row(config, experiment, row_id)
        path = write_replay(experiment, row_id, values, out_dir)
        print(f"✅ Row written to {path}")
        return 0

    print(f"🚀 Running {config.experiment} ({config.name}, seed {config.seed})")
    result = run_experiment(config, args.threads)
    write_run(config, result, out_dir)
    if result.violations:
        print(f"⚠️  {result.violations} assumption violation(s); see {out_dir / 'report.json'}")
        return 2
    print(f"✅ Finished; results in {out_dir}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        return run(args)
    except LabError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"❌ Unexpected error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
