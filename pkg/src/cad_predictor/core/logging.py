"""Logging setup shared by the CLI and the pipeline."""

import logging
import sys
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def configure_logging(level: Optional[Union[str, int]] = None) -> None:
    """Install a single stderr handler on the package logger.

    Args:
        level: Level name or number. Defaults to the CAD_PREDICTOR_LOG_LEVEL
            runtime setting.
    """
    if level is None:
        from cad_predictor.config.models import RuntimeSettings

        level = RuntimeSettings().log_level
    if isinstance(level, str):
        level = level.upper()

    logger = logging.getLogger("cad_predictor")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
