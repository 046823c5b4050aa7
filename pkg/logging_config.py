"""
Logging configuration with log rotation.
Provides structured logging with JSON output and console output.
"""

import logging
import os
import sys
import time
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path

from dotenv import load_dotenv

try:
    from pythonjsonlogger.json import JsonFormatter
except ImportError:  # python-json-logger < 3.1
    from pythonjsonlogger.jsonlogger import JsonFormatter

# Load environment variables from .env file
load_dotenv()

# Empty directory disables file logging (the CLI default)
LOGS_DIR = os.getenv("QUADTOK_LOG_DIR", "")
LOG_LEVEL = os.getenv("QUADTOK_LOG_LEVEL", "INFO")
MAX_BYTES = int(os.getenv("QUADTOK_LOG_MAX_BYTES", 10 * 1024 * 1024))  # 10 MB
BACKUP_COUNT = int(os.getenv("QUADTOK_LOG_BACKUP_COUNT", 10))
LOG_FORMAT = os.getenv("QUADTOK_LOG_FORMAT", "detailed")  # detailed or json


class StructuredJSONFormatter(JsonFormatter):
    """JSON formatter that flattens ``extra_fields`` into the record."""

    def __init__(self):
        super().__init__(
            "%(asctime)s %(levelname)s %(name)s %(message)s %(module)s %(funcName)s %(lineno)d",
            rename_fields={"asctime": "timestamp", "levelname": "level", "name": "logger", "funcName": "function",
                           "lineno": "line"},
        )

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)
        extra_fields = log_record.pop("extra_fields", None)
        if isinstance(extra_fields, dict):
            log_record.update(extra_fields)


class DetailedFormatter(logging.Formatter):
    """Custom detailed formatter for human-readable logs."""

    def __init__(self):
        super().__init__(datefmt="%Y-%m-%d %H:%M:%S")

    def format(self, record):
        record.asctime = self.formatTime(record, self.datefmt)
        line = (
            f"[{record.asctime}] {record.levelname:<8} "
            f"[{record.name}:{record.funcName}:{record.lineno}] "
            f"{record.getMessage()}"
        )
        if record.exc_info:
            return f"{line}\n{self.formatException(record.exc_info)}"
        return line


def setup_logging(level=None, log_format=None, logs_dir=None):
    """
    Configure the root logger.

    - Console output on stderr (stdout carries CLI reports)
    - Rotating file handler and error-only file handler when a log
      directory is configured
    - JSON or detailed formatting for files; console is always detailed
    """
    level = level or LOG_LEVEL
    log_format = log_format or LOG_FORMAT
    logs_dir = LOGS_DIR if logs_dir is None else logs_dir

    file_formatter = StructuredJSONFormatter() if log_format == "json" else DetailedFormatter()

    handlers = [_create_console_handler(DetailedFormatter(), level)]
    if logs_dir:
        directory = Path(logs_dir)
        directory.mkdir(parents=True, exist_ok=True)
        handlers.append(_create_file_handler(directory / "quadtok.log", file_formatter, level))
        handlers.append(_create_file_handler(directory / "quadtok-error.log", file_formatter, logging.ERROR))

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()
    for handler in handlers:
        root_logger.addHandler(handler)

    logging.getLogger("uvicorn").setLevel(level)
    logging.getLogger("fastapi").setLevel(level)

    return logging.getLogger("quadtok")


def _create_console_handler(formatter, level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def _create_file_handler(log_file, formatter, level):
    """Rotates when file size exceeds MAX_BYTES, keeps BACKUP_COUNT backups."""
    handler = RotatingFileHandler(
        log_file,
        maxBytes=MAX_BYTES,
        backupCount=BACKUP_COUNT,
        encoding="utf-8",
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def get_logger(name):
    """
    Get a logger instance with the given name.

    Args:
        name: Logger name (typically __name__)

    Returns:
        logging.Logger instance
    """
    return logging.getLogger(name)


@contextmanager
def log_operation(logger, operation_name, operation_data=None):
    """
    Context manager to log operations with timing.

    Example:
        with log_operation(logger, "score_patches", {"scorer": "pixel_blur"}):
            ...
    """
    start_time = time.perf_counter()
    logger.debug(f"Starting {operation_name}", extra={"extra_fields": operation_data or {}})
    try:
        yield
    except Exception as e:
        duration = time.perf_counter() - start_time
        logger.error(
            f"Failed {operation_name}: {e}",
            exc_info=True,
            extra={"extra_fields": {"duration_seconds": duration, **(operation_data or {})}},
        )
        raise
    duration = time.perf_counter() - start_time
    logger.info(
        f"Completed {operation_name}",
        extra={"extra_fields": {"duration_seconds": duration, **(operation_data or {})}},
    )
