"""Three-level hierarchical vector database built from template embeddings.

Level 1: class prototypes (k-means centroids of template CLS tokens).
Level 2: per-class semantic prototypes (k-means centroids of the class's
         patch tokens).
Level 3: instance buckets holding every patch token of the class, filed under
         its nearest semantic prototype, with provenance (image id, grid cell).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import assign, kmeans_fit
from .types import TokenEmbeddingSet

logger = logging.getLogger(__name__)


@dataclass
class InstanceBucket:
    """All instance tokens filed under one (class, semantic prototype) pair."""

    tokens: np.ndarray     # (n, D) float32
    image_ids: np.ndarray  # (n,) int32 indices into HierarchicalDatabase.image_id_table
    ys: np.ndarray         # (n,) int32 grid rows
    xs: np.ndarray         # (n,) int32 grid columns

    @property
    def size(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class HierarchicalDatabase:
    dim: int
    class_prototypes: np.ndarray               # (C, D) float32
    semantic_prototypes: list[np.ndarray]      # per class: (J_c, D) float32
    buckets: list[list[InstanceBucket]]        # [class][prototype]
    image_id_table: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return int(self.class_prototypes.shape[0])

    def prototypes_per_class(self) -> list[int]:
        return [p.shape[0] for p in self.semantic_prototypes]

    def class_token_count(self, class_index: int) -> int:
        return sum(b.size for b in self.buckets[class_index])

    def total_tokens(self) -> int:
        return sum(self.class_token_count(c) for c in range(self.num_classes))

    def class_tokens(self, class_index: int):
        """Concatenated tokens of one class plus (bucket, position) provenance.

        Token order is bucket-major then position, which defines the
        class-local index used for deterministic tie-breaking in retrieval.
        """
        buckets = self.buckets[class_index]
        if not buckets:
            return np.empty((0, self.dim), dtype=np.float32), np.empty(0, np.int64), np.empty(0, np.int64)
        tokens = np.concatenate([b.tokens for b in buckets], axis=0)
        bucket_ids = np.concatenate(
            [np.full(b.size, j, dtype=np.int64) for j, b in enumerate(buckets)]
        )
        positions = np.concatenate([np.arange(b.size, dtype=np.int64) for b in buckets])
        return tokens, bucket_ids, positions

    def validate(self) -> None:
        c = self.num_classes
        if len(self.semantic_prototypes) != c or len(self.buckets) != c:
            raise ValueError("per-class structures must match class count")
        for protos, class_buckets in zip(self.semantic_prototypes, self.buckets):
            if protos.shape[0] != len(class_buckets):
                raise ValueError("bucket count must match semantic prototype count")
            if protos.size and protos.shape[1] != self.dim:
                raise ValueError("prototype dimension mismatch")


def build_class_prototypes(templates: list[TokenEmbeddingSet], num_classes: int, seed: int):
    """K-means over template CLS tokens; returns (centroids, per-template class index)."""
    if not templates:
        raise ValueError("no templates")
    cls = np.stack([t.cls_token for t in templates]).astype(np.float64)
    result = kmeans_fit(cls, num_classes, seed=seed)
    return result.centroids, result.assignments


def build_semantic_prototypes(class_templates: list[TokenEmbeddingSet], num_prototypes: int, seed: int):
    """K-means over all patch tokens of one class.

    num_prototypes is clipped to the pooled token count when the class is
    smaller than requested.  Returns (centroids, per-token assignment) where
    tokens are pooled template-major in row-major grid order.
    """
    if not class_templates:
        raise ValueError("empty class")
    pooled = np.concatenate([t.tokens_flat() for t in class_templates], axis=0).astype(np.float64)
    effective = min(num_prototypes, pooled.shape[0])
    if effective < num_prototypes:
        logger.warning(
            "requested %d semantic prototypes but class holds %d tokens; clipping",
            num_prototypes,
            pooled.shape[0],
        )
    result = kmeans_fit(pooled, effective, seed=seed)
    return result.centroids, result.assignments


def build_database(
    templates: list[TokenEmbeddingSet],
    num_classes: int,
    num_semantic_prototypes: int,
    seed: int,
) -> HierarchicalDatabase:
    """Compose the three levels into a hierarchical database.

    Each template's patch tokens inherit the class assigned to its CLS token;
    within the class they are filed under their nearest semantic prototype.
    """
    if not templates:
        raise ValueError("no templates")
    dim = templates[0].dim
    for t in templates:
        t.validate()
        if t.dim != dim:
            raise ValueError(f"dimension mismatch: {t.image_id} has D={t.dim}, expected {dim}")
    if num_classes > len(templates):
        raise ValueError("num_classes exceeds template count")

    seed_seq = np.random.SeedSequence(seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(num_classes + 1)]

    class_centroids, class_assign = build_class_prototypes(templates, num_classes, child_seeds[0])

    image_id_table = [t.image_id for t in templates]
    semantic_prototypes: list[np.ndarray] = []
    buckets: list[list[InstanceBucket]] = []

    for c in range(num_classes):
        members = [i for i in range(len(templates)) if class_assign[i] == c]
        class_templates = [templates[i] for i in members]
        if not class_templates:
            semantic_prototypes.append(np.empty((0, dim), dtype=np.float32))
            buckets.append([])
            continue
        protos64, _ = build_semantic_prototypes(
            class_templates, num_semantic_prototypes, child_seeds[c + 1]
        )
        protos = protos64.astype(np.float32)
        semantic_prototypes.append(protos)

        # File tokens under their nearest prototype using the stored float32
        # values so the bucket invariant holds bit-exactly after reload.
        tokens = np.concatenate([t.tokens_flat() for t in class_templates], axis=0).astype(np.float32)
        owner = np.concatenate(
            [np.full(t.grid_height * t.grid_width, idx, dtype=np.int32) for idx, t in zip(members, class_templates)]
        )
        ys = np.concatenate(
            [
                np.repeat(np.arange(t.grid_height, dtype=np.int32), t.grid_width)
                for t in class_templates
            ]
        )
        xs = np.concatenate(
            [
                np.tile(np.arange(t.grid_width, dtype=np.int32), t.grid_height)
                for t in class_templates
            ]
        )
        token_assign = assign(tokens.astype(np.float64), protos.astype(np.float64))

        class_buckets = []
        for j in range(protos.shape[0]):
            sel = token_assign == j
            class_buckets.append(
                InstanceBucket(
                    tokens=tokens[sel],
                    image_ids=owner[sel],
                    ys=ys[sel],
                    xs=xs[sel],
                )
            )
        buckets.append(class_buckets)

    db = HierarchicalDatabase(
        dim=dim,
        class_prototypes=class_centroids.astype(np.float32),
        semantic_prototypes=semantic_prototypes,
        buckets=buckets,
        image_id_table=image_id_table,
    )
    db.validate()
    return db
