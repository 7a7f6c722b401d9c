"""Config-driven experiment runner and CLI."""

from .config import load, validate
from .runner import run, scan, spectrum

__all__ = ["load", "validate", "run", "scan", "spectrum"]
