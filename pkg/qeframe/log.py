"""Custom logging functions."""

import logging
import sys
from typing import Optional

LOGGING_FORMATTER = (
    "[%(levelname)s] %(name)s %(asctime)s %(funcName)s:%(lineno)d - %(message)s"
)

LOGGING_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

logging.getLogger("matplotlib").propagate = False


def get_logger(name: Optional[str] = None, level: str = "INFO") -> logging.Logger:
    """Returns Logger Instance with predefined formatting"""
    logger = logging.getLogger(name=name)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter(LOGGING_FORMATTER))
        logger.addHandler(handler)
        logger.propagate = False
    if not level or level.upper() not in LOGGING_LEVELS:
        logger.warning(
            "invalid logging level: %s, setting logging level to `DEBUG`", level
        )
        level = "DEBUG"
    logger.setLevel(level=level.upper())
    return logger


def set_package_level(level: str) -> None:
    """Sets the logging level of every `qeframe` logger created so far.

    Parameters:
        level (str): One of DEBUG, INFO, WARNING, ERROR, CRITICAL.
    """
    for name in list(logging.root.manager.loggerDict):
        if name == "qeframe" or name.startswith("qeframe."):
            get_logger(name, level)
