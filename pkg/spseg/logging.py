import logging
from logging.handlers import RotatingFileHandler
import os
from typing import Optional

LOGGER_NAME = 'spseg'


def setup_logging(level: str = 'INFO', log_dir: Optional[str] = None) -> logging.Logger:
    """Configure the package logger with a console handler and an optional rotating file."""
    logger = logging.getLogger(LOGGER_NAME)
    log_level = getattr(logging, str(level).upper(), logging.INFO)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # Drop handlers from an earlier call so repeated setup does not duplicate output
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    # Stream logs to console
    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)
    stream_handler.setLevel(log_level)
    logger.addHandler(stream_handler)

    # Optional: Log to file with rotation
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(os.path.join(log_dir, 'spseg.log'), maxBytes=10240, backupCount=3)
        file_handler.setFormatter(formatter)
        file_handler.setLevel(log_level)
        logger.addHandler(file_handler)

    logger.setLevel(log_level)
    logger.debug('Logging is set up.')
    return logger
