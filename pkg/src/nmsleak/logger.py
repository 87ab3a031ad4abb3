"""Logger configuration for the nmsleak package.

This module sets up logging for the entire package with both file and console output,
configurable log levels, log rotation, and an optional per-run log file.
"""

import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional, Union


FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
CONSOLE_FORMAT = '%(levelname)s - %(message)s'


class NmsLeakLogger:
    """Logger class for nmsleak with configurable output and log rotation."""

    def __init__(self, log_file: Optional[str] = None, level: int = logging.INFO):
        """Initialize the logger with the given settings.

        Args:
            log_file: Path to the log file. Defaults to $NMSLEAK_LOG_FILE or 'nmsleak.log'.
            level: Logging level. Defaults to logging.INFO.
        """
        self.log_file = log_file or os.environ.get('NMSLEAK_LOG_FILE', 'nmsleak.log')
        self.level = level
        self._run_handler: Optional[logging.Handler] = None
        self._setup_logger()

    def _setup_logger(self):
        """Configure the logger with both file and console handlers."""
        self.logger = logging.getLogger('nmsleak')
        self.logger.setLevel(self.level)
        self.logger.propagate = False

        # Remove any existing handlers
        self.logger.handlers.clear()

        file_formatter = logging.Formatter(FILE_FORMAT)
        console_formatter = logging.Formatter(CONSOLE_FORMAT)

        # File handler with rotation (max 5MB per file, keep 3 backup files)
        file_handler = RotatingFileHandler(
            self.log_file,
            maxBytes=5 * 1024 * 1024,
            backupCount=3,
            encoding='utf-8',
            delay=True,
        )
        file_handler.setLevel(self.level)
        file_handler.setFormatter(file_formatter)
        self.logger.addHandler(file_handler)

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(console_formatter)
        self.logger.addHandler(console_handler)

        for noisy in ('matplotlib', 'urllib3', 'uvicorn.access', 'PIL'):
            logging.getLogger(noisy).setLevel(logging.WARNING)

    def set_level(self, level: int):
        """Change the logging level of the logger and its file handlers.

        Args:
            level: New logging level (e.g., logging.DEBUG, logging.INFO)
        """
        self.level = level
        self.logger.setLevel(level)
        for handler in self.logger.handlers:
            if isinstance(handler, logging.FileHandler):
                handler.setLevel(level)

    def set_console_level(self, level: int):
        for handler in self.logger.handlers:
            if type(handler) is logging.StreamHandler:
                handler.setLevel(level)

    def attach_run_directory(self, run_dir: Union[str, Path]) -> Path:
        """Mirror the log into `<run_dir>/nmsleak.log` until detached."""
        self.detach_run_directory()
        path = Path(run_dir) / 'nmsleak.log'
        handler = logging.FileHandler(path, mode='w', encoding='utf-8')
        handler.setLevel(self.level)
        handler.setFormatter(logging.Formatter(FILE_FORMAT))
        self.logger.addHandler(handler)
        self._run_handler = handler
        return path

    def detach_run_directory(self):
        if self._run_handler is not None:
            self.logger.removeHandler(self._run_handler)
            self._run_handler.close()
            self._run_handler = None


# Create default logger instance
nmsleak_logger = NmsLeakLogger()
logger = nmsleak_logger.logger
