"""Satellite-tile population classification pipeline."""

__version__ = "0.1.0"
