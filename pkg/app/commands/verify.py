"""verify: run the property suite; nonzero exit on any failure."""
import argparse

from app.commands.common import add_config_args, load_config, start_run
from app.core.logging import get_logger
from app.services.properties import CHECKS, run_properties

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('verify', help="Run gradient checks, the rank oracle and invariance tests")
    add_config_args(parser)
    parser.add_argument('--only', nargs='+', choices=sorted(CHECKS), help="Run just these checks")
    parser.add_argument('--quick', action='store_true', help="Subsample gradient coordinates and oracle sets")
    parser.add_argument('--seed', type=int, help="train.seed")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args, {'train.seed': args.seed})
    start_run(config, 'verify')
    results = run_properties(args.only, seed=config.train.seed, quick=args.quick)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0
