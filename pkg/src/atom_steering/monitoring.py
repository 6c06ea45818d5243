"""
Observability for atom-steering.

Provides:
- Structured logging configuration
- Stage tracing with timing
"""

from __future__ import annotations

import logging
import sys
import time
from contextlib import contextmanager
from typing import TYPE_CHECKING, Any

import structlog

if TYPE_CHECKING:
    from collections.abc import Iterator

logger = structlog.get_logger()


# =============================================================================
# Stage Tracing
# =============================================================================


@contextmanager
def trace_stage(stage: str, **context: Any) -> Iterator[dict[str, Any]]:
    """
    Trace a pipeline stage or command, logging start, completion and failure.

    The yielded dict can be filled with result fields; they are logged on
    completion.

    Usage:
        with trace_stage("train_sae", layer=1) as result:
            ...
            result["final_l0"] = report.final_l0
    """
    start = time.perf_counter()
    result: dict[str, Any] = {}
    logger.info("stage_started", stage=stage, **context)
    try:
        yield result
    except Exception as e:
        duration_ms = (time.perf_counter() - start) * 1000
        logger.error(
            "stage_failed",
            stage=stage,
            duration_ms=round(duration_ms, 2),
            error=str(e),
            error_code=getattr(e, "code", None),
            **context,
        )
        raise
    duration_ms = (time.perf_counter() - start) * 1000
    logger.info(
        "stage_completed",
        stage=stage,
        duration_ms=round(duration_ms, 2),
        **context,
        **result,
    )


# =============================================================================
# Structured Logging Configuration
# =============================================================================


def configure_logging(
    level: str = "INFO",
    json_output: bool = False,
    include_timestamp: bool = True,
) -> None:
    """
    Route structlog events through stdlib logging on stderr.

    stdout stays reserved for command summaries. JSON output renders
    exception info inline so a failed stage is one parseable record.
    """
    processors: list[Any] = [
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.UnicodeDecoder(),
    ]

    if include_timestamp:
        processors.insert(0, structlog.processors.TimeStamper(fmt="iso"))

    if json_output:
        processors.append(structlog.processors.format_exc_info)
        processors.append(structlog.processors.JSONRenderer())
    else:
        processors.append(structlog.dev.ConsoleRenderer())

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.stdlib.BoundLogger,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        stream=sys.stderr,
        format="%(message)s",
    )
