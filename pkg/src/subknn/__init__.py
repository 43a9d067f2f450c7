"""Subspace nearest-neighbour OOD detection on small numpy classifiers."""

__version__ = "0.1.0"
