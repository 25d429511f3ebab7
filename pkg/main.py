import sys
import argparse
import logging
from pathlib import Path

from utils.config import default_config, load_config, parse_config, with_seed
from utils.errors import ConfigError, DriftLabError, IntegrationAbort
from utils.experiments import figure1, simulate, sweep
from utils.export import write_checks, write_error
from utils.verification import SUITE_NAMES, run_suite

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VERIFY_FAILED = 3
# figure1 matches step sizes across runs; figure1_literal takes both steps as written
FIGURE1_PRESETS = ('figure1', 'figure1_literal')


def _parse_values(text: str):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="KDE score drift and Laplace mean-shift particle experiments")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("simulate", help="Run one configured simulation")
    run.add_argument("--config", required=True, help="Experiment config JSON")
    run.add_argument("--out", help="Output directory (default: the config's output_dir)")
    run.add_argument("--seed", type=int, help="Override the config seed")

    fig = sub.add_parser("figure1", help="Conservative versus Laplace displacement comparison")
    fig.add_argument("--config", help="Planar conservative config (default: built-in figure1 template)")
    fig.add_argument("--preset", choices=FIGURE1_PRESETS, default=FIGURE1_PRESETS[0],
                     help="Built-in template used when --config is not given")
    fig.add_argument("--out", help="Output directory")
    fig.add_argument("--seed", type=int, help="Override the config seed")

    verify = sub.add_parser("verify", help="Run a numerical verification suite")
    verify.add_argument("--suite", required=True, choices=SUITE_NAMES + ('all',), help="Suite to run")
    verify.add_argument("--seed", type=int, default=0, help="Root seed for the random setups")
    verify.add_argument("--out", default="output/verify", help="Directory for the JSON report")

    sw = sub.add_parser("sweep", help="Vary N, h or eta and fit a log-log slope")
    sw.add_argument("--config", required=True, help="Experiment config JSON")
    sw.add_argument("--param", required=True, choices=["N", "h", "eta"], help="Parameter to vary")
    sw.add_argument("--values", required=True, type=_parse_values, help="Comma-separated values")
    sw.add_argument("--rate-constants", type=_parse_values, default=[1.0, 1.0, 0.0],
                    help="A,C,beta for the balanced-bandwidth prediction of an h sweep")
    sw.add_argument("--out", help="Output directory")
    sw.add_argument("--seed", type=int, help="Override the config seed")
    return parser


def _out_dir(args, config) -> Path:
    return Path(args.out or config.output_dir)


def _load(args, template=None):
    if args.config is None and template is not None:
        config = parse_config(default_config(template))
    else:
        config = load_config(args.config)
    return with_seed(config, args.seed)


def _run_experiment(out_dir: Path, experiment) -> int:
    try:
        experiment()
    except IntegrationAbort:
        # error.json was written by the experiment
        return EXIT_FAILURE
    except DriftLabError as e:
        write_error(out_dir, {'type': type(e).__name__, 'message': str(e), 'time': None,
                              'particle': getattr(e, 'particle', None)})
        raise
    logger.info(f"Results written to {out_dir}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _load(args)
    out_dir = _out_dir(args, config)
    return _run_experiment(out_dir, lambda: simulate(config, out_dir))


def cmd_figure1(args) -> int:
    config = _load(args, template=args.preset)
    out_dir = _out_dir(args, config)
    return _run_experiment(out_dir, lambda: figure1(config, out_dir))


def cmd_sweep(args) -> int:
    config = _load(args)
    out_dir = _out_dir(args, config)
    return _run_experiment(out_dir, lambda: sweep(config, args.param, args.values, out_dir,
                                                     rate_constants=tuple(args.rate_constants)))


def cmd_verify(args) -> int:
    """Run a suite; exit 3 when any check fails."""
    results = run_suite(args.suite, args.seed)
    report = write_checks([r.to_dict() for r in results], Path(args.out) / f"verify_{args.suite}.json",
                          {'suite': args.suite, 'seed': args.seed})
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    logger.info(f"All {len(results)} checks passed; report in {report}")
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'figure1': cmd_figure1,
    'sweep': cmd_sweep,
    'verify': cmd_verify,
}


def run_command(args) -> int:
    """Dispatch one parsed command and return the process exit status."""
    return COMMANDS[args.command](args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return run_command(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        return EXIT_FAILURE
    except DriftLabError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return EXIT_FAILURE
    except (OSError, ValueError) as e:
        logger.error(f"Error running {args.command}: {str(e)}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
