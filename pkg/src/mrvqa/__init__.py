"""Multi-resolution transformer for no-reference video quality assessment."""

__version__ = "0.1.0"
