"""Backtrackless aligned-spatial graph convolutional networks for graph classification."""

__version__ = "0.1.0"
