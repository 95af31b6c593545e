"""Seeded synthetic token data: clustered classes with separated patch modes.

Used by the benchmark command and the test suite to exercise retrieval and
training without a vision backbone.  Class CLS centers and per-class patch
modes are drawn with a guaranteed minimum pairwise separation relative to the
within-mode noise, so nearest-mode structure is unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import TokenEmbeddingSet


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    templates_per_class: int = 8
    grid_height: int = 8
    grid_width: int = 8
    dim: int = 16
    modes_per_class: int = 3
    separation: float = 5.0   # min center distance as a multiple of noise_std
    noise_std: float = 1.0
    cls_noise_std: float = 0.5
    # Heavy-tailed matching noise: isolated cells whose token strays far from
    # its mode (still normal).  Per-cell nearest-neighbor costs on such cells
    # rival subtle anomalies, so denoising must use spatial context.
    outlier_probability: float = 0.0
    outlier_scale: float = 8.0
    source_height: int = 256
    source_width: int = 256


def _separated_centers(
    rng: np.random.Generator, count: int, dim: int, min_distance: float, scale: float
) -> np.ndarray:
    """Random centers with pairwise distance at least min_distance."""
    centers = np.empty((count, dim))
    placed = 0
    attempts = 0
    while placed < count:
        candidate = rng.normal(0.0, scale, size=dim)
        if placed == 0 or np.linalg.norm(centers[:placed] - candidate, axis=1).min() >= min_distance:
            centers[placed] = candidate
            placed += 1
        attempts += 1
        if attempts > 100_000:
            raise ValueError("could not place separated centers; increase dim or scale")
    return centers


def _centers(spec: SyntheticSpec, seed: int):
    """Class and mode centers shared by every draw for a given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    min_dist = spec.separation * spec.noise_std
    scale = max(3.0 * min_dist, 1.0)
    cls_centers = _separated_centers(
        rng, spec.num_classes, spec.dim, spec.separation * spec.cls_noise_std, scale
    )
    mode_centers = _separated_centers(
        rng, spec.num_classes * spec.modes_per_class, spec.dim, min_dist, scale
    ).reshape(spec.num_classes, spec.modes_per_class, spec.dim)
    return cls_centers, mode_centers


def make_templates(
    spec: SyntheticSpec, seed: int, prefix: str = "template", stream: int = 1
) -> list[TokenEmbeddingSet]:
    """Template embedding sets drawn from the given clustered distribution.

    stream selects an independent substream over the same centers, for
    disjoint template pools (database vs. training) in one world.
    """
    cls_centers, mode_centers = _centers(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    templates = []
    for c in range(spec.num_classes):
        for t in range(spec.templates_per_class):
            templates.append(
                _sample_image(
                    rng,
                    spec,
                    cls_centers[c],
                    mode_centers[c],
                    image_id=f"{prefix}_c{c}_{t:03d}",
                    class_label=f"class{c}",
                )
            )
    return templates


def make_queries(
    spec: SyntheticSpec, seed: int, per_class: int, prefix: str = "query"
) -> list[TokenEmbeddingSet]:
    """Held-out draws: same centers as make_templates(seed), fresh samples."""
    cls_centers, mode_centers = _centers(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    queries = []
    for c in range(spec.num_classes):
        for t in range(per_class):
            queries.append(
                _sample_image(
                    rng,
                    spec,
                    cls_centers[c],
                    mode_centers[c],
                    image_id=f"{prefix}_c{c}_{t:03d}",
                    class_label=f"class{c}",
                )
            )
    return queries


def _sample_image(
    rng: np.random.Generator,
    spec: SyntheticSpec,
    cls_center: np.ndarray,
    modes: np.ndarray,
    image_id: str,
    class_label: str,
) -> TokenEmbeddingSet:
    h, w, d = spec.grid_height, spec.grid_width, spec.dim
    assignment = rng.integers(0, modes.shape[0], size=(h, w))
    noise = rng.normal(0.0, spec.noise_std, size=(h, w, d))
    if spec.outlier_probability > 0.0:
        spikes = rng.uniform(size=(h, w)) < spec.outlier_probability
        noise[spikes] *= spec.outlier_scale
    patches = modes[assignment] + noise
    cls_token = cls_center + rng.normal(0.0, spec.cls_noise_std, size=d)
    return TokenEmbeddingSet(
        image_id=image_id,
        cls_token=cls_token.astype(np.float32),
        patch_tokens=patches.astype(np.float32),
        source_height=spec.source_height,
        source_width=spec.source_width,
        class_label=class_label,
    )
