"""Explicit transformer constructions for linear algebra and conjugate gradient."""

__version__ = "0.1.0"
