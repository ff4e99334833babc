"""Dual-encoder masked image modeling for paired RGB + DSM tiles."""

__version__ = "0.1.0"
