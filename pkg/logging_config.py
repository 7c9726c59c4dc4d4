"""
logging_config.py - Centralized logging configuration for chainbench
"""

import os
import sys
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List

from constants import APP_NAME

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
CONSOLE_FORMAT = '%(name)s - %(levelname)s - %(message)s'
LOG_MAX_BYTES = 5 * 1024 * 1024
LOG_BACKUP_COUNT = 10

# Handlers installed by configure_logging; replaced on the next call
_installed: List[logging.Handler] = []


def _default_log_dir() -> Path:
    if sys.platform.startswith("win"):
        return Path(os.getenv('LOCALAPPDATA', str(Path.home() / "AppData" / "Local"))) / APP_NAME
    if sys.platform == "darwin":
        return Path.home() / "Library" / "Application Support" / APP_NAME
    return Path(os.getenv("XDG_CONFIG_HOME", str(Path.home() / ".config"))) / APP_NAME


def log_dir() -> Path:
    return Path(os.getenv("CHAINBENCH_LOG_DIR") or _default_log_dir())


def _dev_mode() -> bool:
    return os.getenv('CHAINBENCH_DEV', '').lower() in ('1', 'true', 'yes')


def _console(level: int) -> logging.Handler:
    console = logging.StreamHandler()
    console.setLevel(level)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    return console


def configure_logging(verbose: bool = False) -> str:
    """
    Configure application-wide logging: a rotating log file in the user's
    application data directory plus an optional console echo.

    CHAINBENCH_LOG_DIR overrides the directory, CHAINBENCH_DEV adds a debug console.
    Calling it again replaces the handlers of the previous call.

    Args:
        verbose: Also echo INFO records to stderr

    Returns:
        str: Path to the log file
    """
    directory = log_dir()
    directory.mkdir(parents=True, exist_ok=True)
    log_path = str(directory / f"{APP_NAME}.log")

    root_logger = logging.getLogger('')
    for handler in _installed:
        root_logger.removeHandler(handler)
        handler.close()
    _installed.clear()

    file_handler = RotatingFileHandler(log_path, maxBytes=LOG_MAX_BYTES, backupCount=LOG_BACKUP_COUNT,
                                       encoding='utf-8')
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
    file_handler.setLevel(logging.INFO)
    _installed.append(file_handler)

    if _dev_mode():
        root_logger.setLevel(logging.DEBUG)
        _installed.append(_console(logging.DEBUG))
    else:
        root_logger.setLevel(logging.INFO)
        if verbose:
            _installed.append(_console(logging.INFO))

    for handler in _installed:
        root_logger.addHandler(handler)

    logging.getLogger('numpy').setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.info(f"Application started ({APP_NAME})")
    logger.info(f"Log file: {log_path}")
    return log_path
