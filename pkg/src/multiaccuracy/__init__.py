"""Multiaccuracy auditing and post-processing for black-box binary scorers."""

__version__ = "0.1.0"
