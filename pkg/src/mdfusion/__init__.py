"""Missingness-robust multimodal fusion over precomputed embeddings."""

__version__ = "0.1.0"
