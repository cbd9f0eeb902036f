"""Logging configuration using loguru."""
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

DEFAULT_COMPONENT = "rgba-lab"

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
    "<level>{level: <8}</level> | "
    "<magenta>{extra[component]}</magenta> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan> | "
    "<level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {extra[component]} | {name}:{function} | {message}"

_configured = False


def setup_logger(name: Optional[str] = None):
    """Configure the shared loguru sinks once and return the logger bound to ``name``."""
    global _configured
    from src.utils.config import settings

    if not _configured:
        # Remove default handler
        logger.remove()
        # Records logged without a bound component still render
        logger.configure(extra={"component": DEFAULT_COMPONENT})

        # Console handler
        logger.add(
            sys.stderr,
            format=CONSOLE_FORMAT,
            level=settings.log_level,
            colorize=True
        )

        # File handler
        log_path = Path(settings.log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        logger.add(
            settings.log_file,
            format=FILE_FORMAT,
            level=settings.log_level,
            rotation="10 MB",
            retention="1 week"
        )
        _configured = True

    return logger.bind(component=name) if name else logger


log = setup_logger()
