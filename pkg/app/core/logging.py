"""
Centralized logging configuration for the semantic-token encoder.

Provides:
- Console logging with colors
- Per-run file logging with rotation inside the run's output directory
- Separate error log file
- Environment-aware log levels
"""
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

ROOT_LOGGER = 'app'

# Log levels based on environment
LOG_LEVELS = {
    'development': logging.DEBUG,
    'test': logging.WARNING,
    'production': logging.INFO
}

LOG_FORMAT = '%(asctime)s | %(levelname)-8s | %(name)s:%(funcName)s:%(lineno)d | %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_run_handlers: list[logging.Handler] = []


class ColoredFormatter(logging.Formatter):
    """Custom formatter with colors for console output."""

    COLORS = {
        'DEBUG': '\033[36m',     # Cyan
        'INFO': '\033[32m',      # Green
        'WARNING': '\033[33m',   # Yellow
        'ERROR': '\033[31m',     # Red
        'CRITICAL': '\033[35m',  # Magenta
    }
    RESET = '\033[0m'

    def format(self, record):
        color = self.COLORS.get(record.levelname, self.RESET)
        record = logging.makeLogRecord(record.__dict__)
        record.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(record)


def resolve_level() -> int:
    """Pick the log level from LOG_LEVEL, falling back to the ENVIRONMENT table."""
    explicit = os.getenv('LOG_LEVEL')
    if explicit:
        level = logging.getLevelName(explicit.upper())
        if isinstance(level, int):
            return level
    env = os.getenv('ENVIRONMENT', 'development').lower()
    return LOG_LEVELS.get(env, logging.DEBUG)


def setup_logging() -> logging.Logger:
    """
    Configure the package root logger once and return it.

    Every module logger (``app.services.trainer`` etc.) is a child of it, so
    handlers live in a single place.
    """
    logger = logging.getLogger(ROOT_LOGGER)

    # Avoid adding handlers multiple times
    if logger.handlers:
        return logger

    log_level = resolve_level()
    logger.setLevel(log_level)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    if sys.stderr.isatty():
        console_handler.setFormatter(ColoredFormatter(LOG_FORMAT, DATE_FORMAT))
    else:
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
    logger.addHandler(console_handler)

    # Prevent logs from propagating to root logger
    logger.propagate = False

    return logger


def attach_run_log(output_dir: Path) -> Path:
    """
    Add rotating file handlers writing into ``<output_dir>/logs``.

    Any handlers from a previous run in the same process are detached first.

    Returns:
        The log directory that was created
    """
    detach_run_log()
    logger = setup_logging()
    log_dir = Path(output_dir) / 'logs'
    log_dir.mkdir(parents=True, exist_ok=True)

    # File handler for all logs
    file_handler = RotatingFileHandler(
        log_dir / 'app.log',
        maxBytes=10 * 1024 * 1024,  # 10 MB
        backupCount=5,
        encoding='utf-8'
    )
    file_handler.setLevel(logger.level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))

    # Separate file handler for errors only
    error_handler = RotatingFileHandler(
        log_dir / 'error.log',
        maxBytes=10 * 1024 * 1024,  # 10 MB
        backupCount=5,
        encoding='utf-8'
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))

    for handler in (file_handler, error_handler):
        logger.addHandler(handler)
        _run_handlers.append(handler)
    return log_dir


def detach_run_log() -> None:
    """Close and remove the per-run file handlers."""
    logger = logging.getLogger(ROOT_LOGGER)
    while _run_handlers:
        handler = _run_handlers.pop()
        logger.removeHandler(handler)
        handler.close()


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Get a logger instance for a module.

    Usage:
        from app.core.logging import get_logger
        logger = get_logger(__name__)
        logger.info("This is an info message")

    Args:
        name: Module name (use __name__)

    Returns:
        Configured logger instance
    """
    setup_logging()
    if not name or name == ROOT_LOGGER:
        return logging.getLogger(ROOT_LOGGER)
    if not name.startswith(ROOT_LOGGER + '.'):
        name = f"{ROOT_LOGGER}.{name}"
    return logging.getLogger(name)
