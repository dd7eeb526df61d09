"""Grouped knowledge preservation and grouped sharpness-aware training for
long-tailed classification on small dense networks."""

__version__ = "0.1.0"
