"""Matrix-free numerics with probabilistically relaxed stopping criteria."""

__version__ = "0.1.0"
