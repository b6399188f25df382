import argparse
import sys
from typing import Optional, Sequence

from app import __version__
from app.commands import ablate, evaluate, gen_data, inspect, plot_data, train, verify
from app.core.errors import SemtokError
from app.core.logging import detach_run_log, get_logger, setup_logging
from app.middleware.logging import CommandLoggingMiddleware

logger = get_logger(__name__)

COMMANDS = (gen_data, train, evaluate, inspect, verify, plot_data, ablate)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='semtok', description="Semantic-token visual encoder, desk scale")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    middleware = CommandLoggingMiddleware()
    try:
        return middleware.dispatch(args.command, lambda: args.handler(args))
    except SemtokError as e:
        logger.error(f"{type(e).__name__} | {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command} | {e}")
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    finally:
        detach_run_log()


if __name__ == '__main__':
    sys.exit(main())
