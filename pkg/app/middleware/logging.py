"""
Command logging middleware.

Logs every subcommand invocation and its outcome with timing information.
"""
import time
from typing import Callable

from app.core.logging import get_logger

logger = get_logger(__name__)


class CommandLoggingMiddleware:
    """Wraps subcommand handlers with start/finish log lines."""

    def dispatch(self, command: str, call_next: Callable[[], int], detail: str = '') -> int:
        start_time = time.time()
        logger.info(f"> {command}{(' | ' + detail) if detail else ''}")

        try:
            code = call_next() or 0
        except Exception as e:
            duration_ms = (time.time() - start_time) * 1000
            logger.error(f"[ERR] {command} | Exception after {duration_ms:.2f}ms: {str(e)}")
            raise

        duration_ms = (time.time() - start_time) * 1000
        status_indicator = "[OK]" if code == 0 else "[ERR]"
        log_method = logger.info if code == 0 else logger.warning
        log_method(f"{status_indicator} {command} | Exit: {code} | Duration: {duration_ms:.2f}ms")
        return code
