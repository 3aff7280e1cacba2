"""Differentiable adaptive computation time over a small recurrent cell."""

__version__ = "0.1.0"
