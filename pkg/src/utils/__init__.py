"""
Utility modules for the RGBA lab.
"""
from .config import settings
from .logger import setup_logger

__all__ = ["settings", "setup_logger"]
