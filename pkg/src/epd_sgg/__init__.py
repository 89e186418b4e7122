"""Ensemble predicate decoding for long-tailed relation classification."""

__version__ = "0.1.0"
