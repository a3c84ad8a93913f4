"""Desk-scale lab for critic-guided sampling of multi-codebook token sequences."""

__version__ = "0.1.0"
