"""Collaborative driving with compact natural-language V2V messaging on a
deterministic desk-scale simulator."""

__version__ = "0.1.0"
