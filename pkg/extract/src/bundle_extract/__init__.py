"""Embedding-bundle extraction from real images and annotations."""

__version__ = "0.1.0"
