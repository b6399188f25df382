"""plot-data: (iteration, metric) series from a training metrics log, as CSV."""
import argparse
from pathlib import Path

from app.commands.common import add_config_args, load_config
from app.core.logging import get_logger
from app.services.evaluation import metric_series

logger = get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('plot-data', help="Export metric series from a training log for plotting")
    add_config_args(parser)
    parser.add_argument('--metrics', type=Path, help="Metrics log (default: <output_dir>/metrics.jsonl)")
    parser.add_argument('--out', type=Path, help="CSV to write (default: <output_dir>/plots/metrics.csv)")
    parser.add_argument('--wide', action='store_true', help="One column per metric instead of long format")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    out_dir = Path(config.paths.output_dir)
    series = metric_series(args.metrics or out_dir / 'metrics.jsonl')
    if args.wide:
        series = series.pivot_table(index=['step', 'event'], columns='metric', values='value').reset_index()
    target = args.out or out_dir / 'plots' / 'metrics.csv'
    target.parent.mkdir(parents=True, exist_ok=True)
    series.to_csv(target, index=False)
    print(f"{len(series)} rows -> {target}")
    return 0
