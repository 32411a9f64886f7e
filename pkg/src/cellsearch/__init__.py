"""Differentiable cell-based architecture search with channel-group attention."""

__version__ = "0.1.0"
