"""Diversity- and similarity-aware CNN filter pruning engine."""

from .errors import FmpruneError

__all__ = ["FmpruneError"]
__version__ = "0.1.0"
