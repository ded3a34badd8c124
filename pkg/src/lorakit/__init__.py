"""Low-rank adapter parameterizations, initializers and gauge-aware optimizers."""

__version__ = "0.1.0"
