"""Retrieval-augmented anomaly detection on token embeddings.

Pipeline: build a three-level hierarchical vector database from template
embeddings, retrieve per-patch instance candidates coarse-to-fine, correlate
them into an anomaly cost volume, refine it with a guided mixture-of-experts
filter, and score/evaluate the resulting anomaly maps.
"""

__version__ = "0.1.0"

from .errors import ConfigMismatchError, InterchangeError, RaidError
from .types import AnomalyMap, GroundTruthMask, TokenEmbeddingSet

__all__ = [
    "AnomalyMap",
    "ConfigMismatchError",
    "GroundTruthMask",
    "InterchangeError",
    "RaidError",
    "TokenEmbeddingSet",
    "__version__",
]
