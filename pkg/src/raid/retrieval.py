"""Flat and hierarchical retrieval over the vector database, plus cost volumes.

Hierarchical flow per query image: the CLS token selects one class by top-1
cosine similarity; each patch token then selects its top-K' semantic
prototypes within that class, and the final K instance tokens are the top-K
by similarity over the union of the selected prototypes' buckets.  The
retained prototype for a patch is the one whose bucket contributed the single
best instance match.  Flat retrieval scans every stored token of every class
and serves as the correctness oracle and latency baseline.

Similarity-comparison counters are first-class outputs: wall-clock timing
depends on the machine, the counters do not.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .database import HierarchicalDatabase
from .numerics import cosine_similarity_matrix, normalize_rows, top_k_indices
from .types import TokenEmbeddingSet

logger = logging.getLogger(__name__)

_CHUNK_ROWS = 64  # patch rows per similarity matmul block, bounds memory


def _sim_block(queries_n: np.ndarray, targets_n: np.ndarray) -> np.ndarray:
    """Clipped cosine similarities of pre-normalized row blocks."""
    return np.clip(queries_n @ targets_n.T, -1.0, 1.0)


def _chunked_sims(queries_n: np.ndarray, targets_n: np.ndarray) -> np.ndarray:
    """Similarity matrix computed in fixed row blocks, so flat and
    hierarchical paths produce bitwise-equal values on identical inputs."""
    n = queries_n.shape[0]
    out = np.empty((n, targets_n.shape[0]), dtype=np.float64)
    for start in range(0, n, _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, n)
        out[start:stop] = _sim_block(queries_n[start:stop], targets_n)
    return out


@dataclass
class RetrievalResult:
    class_index: int
    prototype_indices: np.ndarray  # (H', W') int64, retained prototype per patch
    prototypes: np.ndarray         # (H', W', D) retained prototype vectors
    instance_tokens: np.ndarray    # (H', W', K, D) float32
    similarities: np.ndarray       # (H', W', K) float64, descending per patch
    token_indices: np.ndarray      # (H', W', K) int64, global token ids (class-major)
    comparisons: int
    elapsed_seconds: float

    @property
    def depth(self) -> int:
        return int(self.similarities.shape[2])


@dataclass
class CostVolume:
    """Per-patch anomaly costs, value = 1 - cosine similarity, in [0, 2]."""

    values: np.ndarray  # (H', W', K) float64

    def min_cost_map(self) -> np.ndarray:
        """Raw unfiltered baseline: best-match cost per patch."""
        return self.values.min(axis=2)


def retrieve_class(cls_token: np.ndarray, db: HierarchicalDatabase) -> int:
    """Top-1 class prototype by cosine similarity (ties to lower index)."""
    if db.num_classes == 0:
        raise ValueError("empty database: no class prototypes")
    sims = cosine_similarity_matrix(
        np.asarray(cls_token, dtype=np.float64)[None, :],
        db.class_prototypes.astype(np.float64),
    )[0]
    return int(top_k_indices(sims, 1)[0])


def retrieve_semantic(
    patch_token: np.ndarray, db: HierarchicalDatabase, class_index: int, k_prime: int
) -> np.ndarray:
    """Top-K' semantic prototype indices within the class, descending similarity."""
    protos = db.semantic_prototypes[class_index]
    if protos.shape[0] == 0:
        raise ValueError(f"class {class_index} has no semantic prototypes")
    effective = min(k_prime, protos.shape[0])
    if effective < k_prime:
        logger.warning(
            "k_prime=%d exceeds the %d prototypes of class %d; clipping",
            k_prime,
            protos.shape[0],
            class_index,
        )
    sims = cosine_similarity_matrix(
        np.asarray(patch_token, dtype=np.float64)[None, :], protos.astype(np.float64)
    )[0]
    return top_k_indices(sims, effective)


def retrieve_instances(
    patch_token: np.ndarray,
    db: HierarchicalDatabase,
    class_index: int,
    prototype_indices: np.ndarray,
    k: int,
):
    """Top-K instance tokens over the union of the candidate prototype buckets.

    Returns (tokens (K, D), similarities (K,), winning prototype index).  The
    winning prototype is the bucket holding the best-matching instance.  When
    the candidate buckets hold fewer than K tokens the search widens to the
    class's remaining buckets in similarity order of their prototypes.
    """
    buckets = db.buckets[class_index]
    candidates = [int(j) for j in np.asarray(prototype_indices, dtype=np.int64)]
    available = sum(buckets[j].size for j in candidates)
    if available < k:
        ranked = retrieve_semantic(patch_token, db, class_index, len(buckets))
        for j in ranked:
            if j not in candidates:
                candidates.append(int(j))
                available += buckets[int(j)].size
            if available >= k:
                break
    if available == 0:
        raise ValueError("all candidate buckets empty")
    if available < k:
        raise ValueError(
            f"class {class_index} holds {available} tokens, fewer than K={k}"
        )

    # Evaluate buckets in ascending bucket order so concatenation position
    # equals the class-local token index, making ties deterministic.
    chosen = sorted(set(int(j) for j in candidates))
    sims_parts, token_parts, bucket_parts = [], [], []
    query = np.asarray(patch_token, dtype=np.float64)[None, :]
    for j in chosen:
        bucket = buckets[j]
        if bucket.size == 0:
            continue
        sims_parts.append(
            cosine_similarity_matrix(query, bucket.tokens.astype(np.float64))[0]
        )
        token_parts.append(bucket.tokens)
        bucket_parts.append(np.full(bucket.size, j, dtype=np.int64))
    sims = np.concatenate(sims_parts)
    tokens = np.concatenate(token_parts, axis=0)
    owners = np.concatenate(bucket_parts)
    top = top_k_indices(sims, k)
    return tokens[top], sims[top], int(owners[top[0]])


def hierarchical_retrieve(
    query: TokenEmbeddingSet, db: HierarchicalDatabase, k_prime: int, k: int
) -> RetrievalResult:
    """Coarse-to-fine retrieval for every patch of a query image."""
    query.validate()
    if query.dim != db.dim:
        raise ValueError(f"query dimension {query.dim} does not match database {db.dim}")
    started = time.perf_counter()
    comparisons = 0

    c_hat = retrieve_class(query.cls_token, db)
    comparisons += db.num_classes

    protos = db.semantic_prototypes[c_hat]
    j_total = protos.shape[0]
    if j_total == 0:
        raise ValueError(f"class {c_hat} has no semantic prototypes")
    buckets = db.buckets[c_hat]
    bucket_sizes = np.array([b.size for b in buckets], dtype=np.int64)
    class_total = int(bucket_sizes.sum())
    if class_total == 0:
        raise ValueError("all candidate buckets empty")
    if class_total < k:
        raise ValueError(f"class {c_hat} holds {class_total} tokens, fewer than K={k}")

    h, w = query.grid_height, query.grid_width
    n = h * w
    patches = query.tokens_flat().astype(np.float64)

    effective_kp = min(k_prime, j_total)
    if effective_kp < k_prime:
        logger.warning(
            "k_prime=%d exceeds the %d prototypes of class %d; clipping",
            k_prime,
            j_total,
            c_hat,
        )
    proto_sims = cosine_similarity_matrix(patches, protos.astype(np.float64))  # (N, J)
    comparisons += n * j_total
    # Stable argsort of -sims gives descending order with ties to lower index.
    proto_order = np.argsort(-proto_sims, axis=1, kind="stable")

    selected = np.zeros((n, j_total), dtype=bool)
    np.put_along_axis(selected, proto_order[:, :effective_kp], True, axis=1)

    # Widen any patch whose candidate union is smaller than K.
    counts = selected @ bucket_sizes
    for row in np.flatnonzero(counts < k):
        extra = effective_kp
        while counts[row] < k and extra < j_total:
            j = proto_order[row, extra]
            if not selected[row, j]:
                selected[row, j] = True
                counts[row] += bucket_sizes[j]
            extra += 1

    # Bucket-grouped similarity evaluation: one chunked matmul per bucket over
    # the patches that selected it.
    bucket_sims: list[np.ndarray | None] = [None] * j_total
    bucket_rows: list[np.ndarray | None] = [None] * j_total
    normalized_patches = normalize_rows(patches)
    for j in range(j_total):
        rows = np.flatnonzero(selected[:, j])
        if rows.size == 0 or buckets[j].size == 0:
            continue
        tokens_n = normalize_rows(buckets[j].tokens.astype(np.float64))
        bucket_sims[j] = _chunked_sims(normalized_patches[rows], tokens_n)
        bucket_rows[j] = rows
        comparisons += rows.size * buckets[j].size
    row_slots = np.full((n, j_total), -1, dtype=np.int64)
    for j in range(j_total):
        if bucket_rows[j] is not None:
            row_slots[bucket_rows[j], j] = np.arange(bucket_rows[j].size)

    bucket_offsets = np.concatenate([[0], np.cumsum(bucket_sizes)])
    global_offset = _class_token_offset(db, c_hat)
    dim = db.dim
    out_sims = np.empty((n, k), dtype=np.float64)
    out_index = np.empty((n, k), dtype=np.int64)
    out_proto = np.empty(n, dtype=np.int64)
    for row in range(n):
        kept_js: list[int] = []
        parts: list[np.ndarray] = []
        for j in np.flatnonzero(selected[row]):
            slot = row_slots[row, j]
            if bucket_sims[j] is not None and slot >= 0:
                kept_js.append(int(j))
                parts.append(bucket_sims[j][slot])
        sims = np.concatenate(parts)
        # Concatenation follows ascending bucket order, so positions map
        # monotonically onto class-local token indices: concat position t in
        # part p corresponds to class-local index offsets[kept_js[p]] + (t -
        # part start), keeping the lower-index tie rule aligned with the flat
        # scan.
        sizes = np.array([p.size for p in parts], dtype=np.int64)
        part_starts = np.concatenate([[0], np.cumsum(sizes)])
        class_local_base = bucket_offsets[np.array(kept_js, dtype=np.int64)]
        top = top_k_indices(sims, k)
        part_of_top = np.searchsorted(part_starts, top, side="right") - 1
        local = top - part_starts[part_of_top] + class_local_base[part_of_top]
        out_sims[row] = sims[top]
        out_index[row] = global_offset + local
        out_proto[row] = kept_js[int(part_of_top[0])]

    elapsed = time.perf_counter() - started
    class_tokens, _, _ = db.class_tokens(c_hat)
    out_tokens = class_tokens[(out_index - global_offset).ravel()].reshape(n, k, dim)
    proto_vectors = protos[out_proto].astype(np.float32).reshape(h, w, dim)
    return RetrievalResult(
        class_index=c_hat,
        prototype_indices=out_proto.reshape(h, w),
        prototypes=proto_vectors,
        instance_tokens=out_tokens.reshape(h, w, k, dim),
        similarities=out_sims.reshape(h, w, k),
        token_indices=out_index.reshape(h, w, k),
        comparisons=comparisons,
        elapsed_seconds=elapsed,
    )


def flat_retrieve(query: TokenEmbeddingSet, db: HierarchicalDatabase, k: int) -> RetrievalResult:
    """Exhaustive cosine scan over every instance token of every class."""
    query.validate()
    if query.dim != db.dim:
        raise ValueError(f"query dimension {query.dim} does not match database {db.dim}")
    if db.num_classes == 0:
        raise ValueError("empty database: no class prototypes")
    started = time.perf_counter()

    all_tokens, class_ids, bucket_ids = _all_tokens(db)
    total = all_tokens.shape[0]
    if total == 0:
        raise ValueError("empty database: no instance tokens")
    if total < k:
        raise ValueError(f"database holds {total} tokens, fewer than K={k}")

    h, w = query.grid_height, query.grid_width
    n = h * w
    dim = db.dim
    patches_n = normalize_rows(query.tokens_flat().astype(np.float64))
    tokens_n = normalize_rows(all_tokens.astype(np.float64))

    out_tokens = np.empty((n, k, dim), dtype=np.float32)
    out_sims = np.empty((n, k), dtype=np.float64)
    out_index = np.empty((n, k), dtype=np.int64)
    out_class = np.empty(n, dtype=np.int64)
    out_proto = np.empty(n, dtype=np.int64)
    best_sim = -np.inf
    best_class = 0
    for start in range(0, n, _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, n)
        sims_block = _sim_block(patches_n[start:stop], tokens_n)
        for local, row in enumerate(range(start, stop)):
            top = top_k_indices(sims_block[local], k)
            out_sims[row] = sims_block[local][top]
            out_tokens[row] = all_tokens[top]
            out_index[row] = top
            out_class[row] = class_ids[top[0]]
            out_proto[row] = bucket_ids[top[0]]
            if out_sims[row, 0] > best_sim:
                best_sim = out_sims[row, 0]
                best_class = int(out_class[row])

    comparisons = n * total
    elapsed = time.perf_counter() - started

    proto_vectors = np.empty((n, dim), dtype=np.float32)
    for row in range(n):
        proto_vectors[row] = db.semantic_prototypes[out_class[row]][out_proto[row]]
    return RetrievalResult(
        class_index=best_class,
        prototype_indices=out_proto.reshape(h, w),
        prototypes=proto_vectors.reshape(h, w, dim),
        instance_tokens=out_tokens.reshape(h, w, k, dim),
        similarities=out_sims.reshape(h, w, k),
        token_indices=out_index.reshape(h, w, k),
        comparisons=comparisons,
        elapsed_seconds=elapsed,
    )


def _class_token_offset(db: HierarchicalDatabase, class_index: int) -> int:
    return sum(db.class_token_count(c) for c in range(class_index))


def _all_tokens(db: HierarchicalDatabase):
    """Global token matrix in class-major, bucket-major, position order."""
    tokens, classes, buckets = [], [], []
    for c in range(db.num_classes):
        for j, bucket in enumerate(db.buckets[c]):
            if bucket.size == 0:
                continue
            tokens.append(bucket.tokens)
            classes.append(np.full(bucket.size, c, dtype=np.int64))
            buckets.append(np.full(bucket.size, j, dtype=np.int64))
    if not tokens:
        return (
            np.empty((0, db.dim), dtype=np.float32),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
        )
    return np.concatenate(tokens, axis=0), np.concatenate(classes), np.concatenate(buckets)


def build_cost_volume(retrieval: RetrievalResult, query: TokenEmbeddingSet) -> CostVolume:
    """Anomaly costs 1 - similarity for every (patch, candidate) pair."""
    h, w = query.grid_height, query.grid_width
    if retrieval.similarities.shape[:2] != (h, w):
        raise ValueError("retrieval grid does not match the query grid")
    values = 1.0 - retrieval.similarities
    return CostVolume(values=np.clip(values, 0.0, 2.0))
