"""Roof segment dataset construction, attribute losses, evaluation and LoD2 reconstruction."""

__version__ = "0.1.0"
