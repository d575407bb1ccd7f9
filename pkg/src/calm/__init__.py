"""Causal discovery from tabular data with pairwise evidence scores and a selective state-space classifier."""
__version__ = "0.1.0"
