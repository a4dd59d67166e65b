import sys
import logging
import argparse

from dotenv import load_dotenv

from commands.data import router as data_router
from commands.training import router as training_router
from commands.evaluation import router as evaluation_router
from middleware import CommandLoggingMiddleware, PerformanceMiddleware
from models.config import LOG_LEVEL, SLOW_THRESHOLD_S, load_run_config
from models.errors import ConfigError, G2CError, UsageError

# Load .env file
load_dotenv()

logger = logging.getLogger("g2c-cli")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

ROUTERS = [data_router, training_router, evaluation_router]


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting with argparse's code 2"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _global_flags(parser, suppress=False):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="Run configuration (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="Override corpus and training seeds")
    parser.add_argument("--out", default=default, help="Output root (default: $G2C_OUT_DIR or runs)")


def build_parser():
    parser = ArgumentParser(prog="g2c", description="Generator-to-classifier multi-stain pipeline")
    _global_flags(parser)
    # flags may also follow the subcommand
    shared = ArgumentParser(add_help=False)
    _global_flags(shared, suppress=True)

    subparsers = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    handlers = {}
    for router in ROUTERS:
        for name, command in router.commands.items():
            sub = subparsers.add_parser(name, help=command.help, parents=[shared])
            for flags, kwargs in command.arguments:
                sub.add_argument(*flags, **kwargs)
            handlers[name] = command.handler
    return parser, handlers


def dispatch(command, args, handlers):
    config = load_run_config(args.config, args.seed)
    return handlers[command](args, config)


def main(argv=None):
    """
    Entry point; returns the exit code

    0 success, 1 usage or configuration error, 2 runtime failure
    """
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    parser, handlers = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as error:
        print(str(error), file=sys.stderr)
        return EXIT_USAGE

    app = PerformanceMiddleware(
        CommandLoggingMiddleware(lambda command, a: dispatch(command, a, handlers)),
        slow_threshold_s=SLOW_THRESHOLD_S,
    )
    try:
        return app(args.command, args)
    except (UsageError, ConfigError) as error:
        logger.error(str(error))
        return EXIT_USAGE
    except G2CError as error:
        logger.error(f"{type(error).__name__}: {error}")
        return EXIT_FAILURE
    except OSError as error:
        logger.error(f"I/O failure: {error}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
