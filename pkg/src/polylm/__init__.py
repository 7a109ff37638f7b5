"""Multilingual instruction-tuned decoder recipe at desk scale."""

__version__ = "0.1.0"
