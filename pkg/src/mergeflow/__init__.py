"""Invertible flow matching between (content, style) embedding pairs and merged embeddings."""

__version__ = "0.1.0"
