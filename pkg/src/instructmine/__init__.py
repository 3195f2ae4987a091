"""Multimodal labeling-instruction mining over precomputed embeddings."""

__version__ = "0.1.0"

from . import baselines, dataset, evaluate, fusion, index, metrics, queries, selection, synth  # noqa: F401
from .errors import EngineError  # noqa: F401
