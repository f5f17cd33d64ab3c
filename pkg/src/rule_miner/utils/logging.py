"""Structured logging for rule-miner runs.

Records carry the CLI command and the config fingerprint, and any ``ctx_*`` extras
attached with :func:`log_with_context`.
"""

import functools
import json
import logging
import sys
import time
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Optional, TypeVar

from ..config.settings import LoggingConfig


F = TypeVar("F", bound=Callable[..., Any])

CONTEXT_PREFIX = "ctx_"
RUN_FIELDS = ("command", "fingerprint")


def _timestamp(record: logging.LogRecord) -> str:
    moment = datetime.fromtimestamp(record.created, tz=timezone.utc)
    return moment.isoformat(timespec="milliseconds").replace("+00:00", "Z")


def _context_fields(record: logging.LogRecord) -> Dict[str, Any]:
    return {
        key: value for key, value in vars(record).items()
        if key.startswith(CONTEXT_PREFIX) or key in RUN_FIELDS
    }


class JSONFormatter(logging.Formatter):
    """One JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        entry: Dict[str, Any] = {
            'timestamp': _timestamp(record),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'function': record.funcName,
            'line': record.lineno,
        }
        entry.update(_context_fields(record))
        if record.exc_info:
            entry['exception'] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


class TextFormatter(logging.Formatter):
    """Single-line console format; colors only when the stream is a terminal."""

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def __init__(self, use_colors: bool = True, stream: Any = None):
        super().__init__()
        stream = stream or sys.stderr
        self.use_colors = use_colors and hasattr(stream, "isatty") and stream.isatty()

    def format(self, record: logging.LogRecord) -> str:
        level = record.levelname
        if self.use_colors and level in self.COLORS:
            level = f"{self.COLORS[level]}{level}{self.RESET}"

        line = f"{_timestamp(record)} [{level}] {record.name}: {record.getMessage()}"
        extras = {
            key[len(CONTEXT_PREFIX):]: value for key, value in _context_fields(record).items()
            if key.startswith(CONTEXT_PREFIX)
        }
        if extras:
            line += " | " + " ".join(f"{key}={value}" for key, value in extras.items())
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


class RunContextFilter(logging.Filter):
    """Stamps every record with the command being run and its config fingerprint."""

    def __init__(self, command: str, fingerprint: Optional[str] = None):
        super().__init__()
        self.command = command
        self.fingerprint = fingerprint

    def filter(self, record: logging.LogRecord) -> bool:
        record.command = self.command
        if self.fingerprint is not None:
            record.fingerprint = self.fingerprint
        return True


def setup_logging(
    config: LoggingConfig,
    command: str = "rule-miner",
    fingerprint: Optional[str] = None,
) -> None:
    """
    Replace the root handlers with one handler built from ``config``.

    Args:
        config: Logging section of the run config
        command: CLI command stamped on every record
        fingerprint: Config fingerprint stamped on every record, if known
    """
    target = config.output.lower()
    stream = {'stdout': sys.stdout, 'stderr': sys.stderr}.get(target)
    if stream is not None:
        handler: logging.Handler = logging.StreamHandler(stream)
    else:
        handler = logging.FileHandler(config.output, encoding="utf-8")

    if config.format.lower() == 'json':
        handler.setFormatter(JSONFormatter())
    else:
        handler.setFormatter(TextFormatter(use_colors=stream is not None, stream=stream))
    handler.addFilter(RunContextFilter(command, fingerprint))

    level = logging.getLevelName(config.level.upper())
    if not isinstance(level, int):
        level = logging.INFO

    root = logging.getLogger()
    root.setLevel(level)
    root.handlers.clear()
    root.addHandler(handler)

    logging.getLogger(__name__).debug(
        f"Logging to {config.output} as {config.format} at {logging.getLevelName(level)} "
        f"(command={command})"
    )


def log_with_context(logger: logging.Logger, level: int, message: str, **context):
    """Log ``message`` with ``context`` attached as ``ctx_*`` record attributes."""
    extra = {f"{CONTEXT_PREFIX}{key}": value for key, value in context.items()}
    logger.log(level, message, extra=extra)


def log_performance(logger: logging.Logger, operation: str, duration_ms: float, **context):
    log_with_context(
        logger,
        logging.INFO,
        f"{operation} took {duration_ms:.1f} ms",
        operation=operation,
        duration_ms=round(duration_ms, 3),
        **context
    )


def log_error_with_context(logger: logging.Logger, error: Exception, operation: str, **context):
    """Log a failed operation; the traceback goes out at DEBUG."""
    log_with_context(
        logger,
        logging.ERROR,
        f"{operation} failed: {error}",
        operation=operation,
        error_type=type(error).__name__,
        **context
    )
    logger.debug(f"Traceback for {operation}", exc_info=error)


def log_function_call(func: F) -> F:
    """Time a pipeline stage and log its duration or its failure."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger = logging.getLogger(func.__module__)
        owner = args[0].__class__.__name__ if args and hasattr(args[0], func.__name__) else None
        operation = f"{owner}.{func.__name__}" if owner else func.__name__
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            log_error_with_context(
                logger, e, operation, duration_ms=round((time.perf_counter() - start) * 1000, 3)
            )
            raise
        log_performance(logger, operation, (time.perf_counter() - start) * 1000)
        return result

    return wrapper  # type: ignore[return-value]
