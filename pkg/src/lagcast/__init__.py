"""Differentiable Lagrangian precipitation nowcasting on synthetic storms."""

__version__ = "0.1.0"
