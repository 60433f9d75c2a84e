import sys
import warnings
from typing import Optional

from loguru import logger
from .config import Config

CONSOLE_FORMAT = ("<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
                  "<level>{level: <8}</level> | "
                  "<cyan>{extra[name]}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
                  "<level>{message}</level>")
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {extra[name]}:{function}:{line} | {message}"


def _route_warnings(message, category, filename, lineno, file=None, line=None):
    """torch/numpy warnings go through the same sinks as everything else"""
    logger.bind(name="warnings").opt(depth=2).warning(f"⚠️ {category.__name__}: {message} ({filename}:{lineno})")


def setup_logger(level: Optional[str] = None, log_file: Optional[str] = None):
    """(Re)configure the stderr sink and the optional rotating file sink.

    Called once at import with Config values; the CLI calls it again when
    ``--log-level`` is given. An empty log file disables the file sink.
    """
    level = (level or Config.LOG_LEVEL).upper()
    log_file = Config.LOG_FILE if log_file is None else log_file

    logger.remove()
    logger.configure(extra={"name": "app"})
    logger.add(sys.stderr, level=level, format=CONSOLE_FORMAT, colorize=True)
    if log_file:
        logger.add(
            log_file,
            level=level,
            format=FILE_FORMAT,
            rotation=Config.LOG_ROTATION,
            retention=Config.LOG_RETENTION,
            compression="zip",
            encoding="utf-8"
        )
    warnings.showwarning = _route_warnings
    return logger.bind(name="app")


app_logger = setup_logger()


def get_logger(name: str = None):
    """Get a logger instance with optional name binding"""
    if name:
        return app_logger.bind(name=name)
    return app_logger
