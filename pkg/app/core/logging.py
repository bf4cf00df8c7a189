"""
app/core/logging.py

Structured logging setup using structlog.

- production: one JSON object per line, numpy scalars and arrays turned into
  plain numbers and lists first.
- development: coloured console lines with timestamps.

Everything goes to stderr; report files and CSVs are the only program output.

Usage:
    from app.core.logging import get_logger
    logger = get_logger(__name__)
    logger.info("finetune_checkpoint", run_id=run_id, step=step)

Never use print() anywhere in the application; always use a logger.
"""

import logging
import sys
from typing import Any

import numpy as np
import structlog
from structlog.types import EventDict, Processor, WrappedLogger

# Arrays larger than this are summarized by shape instead of dumped.
MAX_LOGGED_ARRAY = 16


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        if value.size > MAX_LOGGED_ARRAY:
            return f"<array shape={value.shape}>"
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def numpy_to_builtin(_: WrappedLogger, __: str, event_dict: EventDict) -> EventDict:
    """structlog processor: numpy values become JSON-serializable builtins."""
    return {key: _plain(value) for key, value in event_dict.items()}


def setup_logging(environment: str = "development", level: str = "INFO") -> None:
    """Configure structlog and stdlib logging once per process (``app.main.main``).

    Args:
        environment: "development" or "production"; picks the renderer.
        level: Minimum level name, e.g. "INFO".
    """
    numeric_level = logging.getLevelNamesMapping().get(level.upper(), logging.INFO)

    processors: list[Processor] = [
        structlog.stdlib.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        numpy_to_builtin,
    ]
    if environment == "production":
        processors += [structlog.processors.dict_tracebacks, structlog.processors.JSONRenderer()]
    else:
        processors.append(structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty()))

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=True,
    )

    # numpy/scipy RuntimeWarnings (overflow in exp, line-search failures) land on the same stream.
    logging.captureWarnings(True)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, level=numeric_level)


def get_logger(name: str | None = None) -> structlog.stdlib.BoundLogger:
    return structlog.get_logger(name)
