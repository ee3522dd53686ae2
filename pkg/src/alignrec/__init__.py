"""Selective state-space sequential recommender with per-batch test-time
adaptation driven by two self-supervised alignment losses."""

__version__ = "0.1.0"
