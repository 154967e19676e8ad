"""
ABMT Logging Configuration

Utilities for configuring logging for ABMT components and for timing the
long-running stages of a training run (re-ranking, clustering, epochs).
"""

import logging
import sys
import time
from contextlib import contextmanager
from typing import Dict, Iterator, Optional, Tuple

# style -> (format with timestamp, format without timestamp)
_FORMATS: Dict[str, Tuple[str, str]] = {
    "simple": (
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        "%(name)s - %(levelname)s - %(message)s",
    ),
    "detailed": (
        "%(asctime)s - %(name)s:%(lineno)d - %(levelname)s - %(message)s",
        "%(name)s:%(lineno)d - %(levelname)s - %(message)s",
    ),
    # emoji markers already say which stage is talking
    "emoji": ("%(asctime)s - %(message)s", "%(message)s"),
}


def setup_abmt_logging(
    level: str = "INFO",
    format_style: str = "emoji",
    include_timestamp: bool = True,
    log_file: Optional[str] = None,
) -> None:
    """
    Set up logging for ABMT components.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        format_style: Log format style ('simple', 'detailed', 'emoji')
        include_timestamp: Whether to include timestamps in logs
        log_file: Optional file path (e.g. ``<run_dir>/train.log``) to also log to
    """
    if format_style not in _FORMATS:
        raise ValueError(f"Unknown format_style: {format_style}")
    with_ts, without_ts = _FORMATS[format_style]

    logger = logging.getLogger("abmt")
    logger.setLevel(getattr(logging, level.upper()))

    for handler in logger.handlers[:]:
        logger.removeHandler(handler)

    formatter = logging.Formatter(
        with_ts if include_timestamp else without_ts,
        datefmt="%Y-%m-%d %H:%M:%S" if include_timestamp else None,
    )

    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    logger.propagate = False

    logger.info(f"🚀 ABMT logging configured: level={level}, style={format_style}")


def set_abmt_log_level(level: str) -> None:
    """Set the log level for all ABMT components."""
    logger = logging.getLogger("abmt")
    logger.setLevel(getattr(logging, level.upper()))
    logger.info(f"📊 ABMT log level changed to {level}")


def disable_abmt_logging() -> None:
    """Silence every ABMT logger (useful inside long test suites)."""
    logging.getLogger("abmt").disabled = True


def enable_abmt_logging() -> None:
    logging.getLogger("abmt").disabled = False


def get_abmt_logger(name: str) -> logging.Logger:
    """Return the child logger ``abmt.<name>``."""
    return logging.getLogger(f"abmt.{name}")


@contextmanager
def timed_stage(logger: logging.Logger, stage: str, level: int = logging.INFO) -> Iterator[None]:
    """
    Log how long a stage took.

    Args:
        logger: Logger to report to
        stage: Human readable stage name, e.g. "re-ranking 320 samples"
        level: Level of the completion message

    Failures are logged at ERROR with the elapsed time and re-raised.
    """
    start_time = time.time()
    try:
        yield
    except Exception as e:
        duration = time.time() - start_time
        logger.error(f"❌ {stage} failed after {duration:.3f}s: {type(e).__name__}: {e}")
        raise
    duration = time.time() - start_time
    logger.log(level, f"⏱️  {stage} done in {duration:.3f}s")


def enable_debug_logging(log_file: Optional[str] = None) -> None:
    """Enable debug logging with detailed format."""
    setup_abmt_logging(level="DEBUG", format_style="detailed", log_file=log_file)


def enable_info_logging(log_file: Optional[str] = None) -> None:
    """Enable info logging with emoji format."""
    setup_abmt_logging(level="INFO", format_style="emoji", log_file=log_file)


def enable_quiet_logging() -> None:
    """Enable only error and critical logging."""
    setup_abmt_logging(level="ERROR", format_style="simple", include_timestamp=False)
