"""Absolute EIT of the head with uncertain scalp shape and electrode contacts."""

__version__ = "0.1.0"
