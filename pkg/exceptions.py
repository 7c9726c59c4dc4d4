"""
exceptions.py - Exception handling infrastructure for chainbench
"""

import sys
import logging
import strings
from constants import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR

logger = logging.getLogger(__name__)

class ExceptionHandler:
    """
    Centralized exception handling for the command line.
    Maps known error families to user messages and process exit codes.
    """

    def __init__(self):
        """Initialize the exception handler."""
        # None writes to whatever sys.stderr is at report time
        self.stream = None

    def install_global_handler(self):
        """Install as global exception handler for unhandled exceptions."""
        sys.excepthook = self.global_exception_handler

    def global_exception_handler(self, exc_type, exc_value, exc_traceback):
        """
        Global handler for unhandled exceptions.
        Logs the full traceback and prints one line to the user.

        Args:
            exc_type: Exception type
            exc_value: Exception value
            exc_traceback: Exception traceback
        """
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
            return
        logger.critical(
            "Unhandled exception",
            exc_info=(exc_type, exc_value, exc_traceback)
        )
        print(strings.ERROR_UNEXPECTED.format(f"{exc_type.__name__}: {exc_value}"), file=self.stream or sys.stderr)

    def handle_error(self, error, context="operation"):
        """
        Report an error raised by a command.

        Args:
            error: The exception that occurred
            context: Context description for the log record

        Returns:
            int: Process exit code for the error family
        """
        from experiment_config import ConfigError
        from benchmark_driver import BenchmarkError
        from reports import ReportError

        if isinstance(error, ConfigError):
            logger.error(f"Config error during {context}: {error}")
            print(strings.ERROR_CONFIG.format(error), file=self.stream or sys.stderr)
            return EXIT_CONFIG_ERROR

        elif isinstance(error, BenchmarkError):
            logger.error(f"Run error during {context}: {error}", exc_info=True)
            print(strings.ERROR_RUNTIME.format(error), file=self.stream or sys.stderr)
            return EXIT_RUNTIME_ERROR

        elif isinstance(error, ReportError):
            logger.error(f"Report error during {context}: {error}")
            print(strings.ERROR_REPORT.format(error), file=self.stream or sys.stderr)
            return EXIT_RUNTIME_ERROR

        else:
            logger.error(
                f"Unhandled exception in {context}",
                exc_info=True
            )
            print(strings.ERROR_UNEXPECTED.format(f"{type(error).__name__}: {error}"), file=self.stream or sys.stderr)
            return EXIT_RUNTIME_ERROR


# Create a singleton instance
exception_handler = ExceptionHandler()
