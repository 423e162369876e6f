"""Generative place recognition: descriptors in, structured scene identifiers out."""

__version__ = "0.1.0"
