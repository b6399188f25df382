"""Shared argument handling for the subcommands."""
import argparse
import json
from pathlib import Path
from typing import Any, Optional

from app import __version__
from app.core.config import RunConfig, load_run_config
from app.core.errors import ConfigError, PathError
from app.core.logging import attach_run_log, get_logger

logger = get_logger(__name__)


def add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, help="JSON or TOML run config (default: $SEMTOK_CONFIG)")
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Override a config field, e.g. --set train.lr=0.001 (repeatable)")
    parser.add_argument('--output-dir', help="Run output directory (paths.output_dir)")


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition('=')
        if not sep or not key:
            raise ConfigError(pair, "override must look like section.key=value")
        overrides[key.strip()] = value
    return overrides


def load_config(args: argparse.Namespace, flags: Optional[dict[str, Any]] = None) -> RunConfig:
    """File values, then --set overrides, then dedicated flags (flags win)."""
    overrides: dict[str, Any] = parse_overrides(args.overrides)
    if args.output_dir:
        overrides['paths.output_dir'] = args.output_dir
    overrides.update({k: v for k, v in (flags or {}).items() if v is not None})
    return load_run_config(args.config, overrides)


def start_run(config: RunConfig, command: str) -> Path:
    """Create the output dir, attach the per-run log files and write the run manifest."""
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    attach_run_log(out)
    manifest = {
        'command': command,
        'code_version': __version__,
        'seed': config.train.seed,
        'config': config.model_dump(),
    }
    path = out / 'manifests' / f'{command}.json'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return out


def existing_corpus(config: RunConfig, name: str, required: bool = True) -> Optional[Path]:
    """Configured corpus path, also accepting the gzip variant of the default location."""
    path = config.paths.resolve(name)
    for candidate in (path, path.with_name(path.name + '.gz')):
        if candidate.exists():
            return candidate
    if required:
        raise PathError(path, f"{name.replace('_', ' ')} not found: {path} (run gen-data first)")
    return None


def print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=str))
