"""Core data carriers shared by the pipeline stages.

Token embeddings enter the pipeline as one CLS vector plus an H'xW' grid of
patch vectors per image; everything downstream (database build, retrieval,
filtering, scoring) consumes this shape.  Grids are numpy arrays in row-major
(y, x, channel) order throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TokenEmbeddingSet:
    """Per-image token embeddings: CLS summary vector plus patch-token grid."""

    image_id: str
    cls_token: np.ndarray    # (D,)
    patch_tokens: np.ndarray  # (H', W', D)
    source_height: int
    source_width: int
    class_label: str | None = None

    def __post_init__(self):
        self.cls_token = np.asarray(self.cls_token, dtype=np.float32)
        self.patch_tokens = np.asarray(self.patch_tokens, dtype=np.float32)

    @property
    def dim(self) -> int:
        return int(self.cls_token.shape[0])

    @property
    def grid_height(self) -> int:
        return int(self.patch_tokens.shape[0])

    @property
    def grid_width(self) -> int:
        return int(self.patch_tokens.shape[1])

    def validate(self) -> None:
        if self.cls_token.ndim != 1 or self.cls_token.shape[0] < 1:
            raise ValueError("cls_token must be a non-empty vector")
        if self.patch_tokens.ndim != 3:
            raise ValueError("patch_tokens must have shape (H', W', D)")
        h, w, d = self.patch_tokens.shape
        if h < 1 or w < 1:
            raise ValueError("patch grid must be at least 1x1")
        if d != self.cls_token.shape[0]:
            raise ValueError(
                f"patch token dimension {d} does not match CLS dimension {self.cls_token.shape[0]}"
            )
        if self.source_height < 1 or self.source_width < 1:
            raise ValueError("source dimensions must be positive")
        if not np.isfinite(self.cls_token).all() or not np.isfinite(self.patch_tokens).all():
            raise ValueError("non-finite value in embedding set")

    def tokens_flat(self) -> np.ndarray:
        """Patch tokens as an (H'*W', D) matrix, rows in row-major grid order."""
        h, w, d = self.patch_tokens.shape
        return self.patch_tokens.reshape(h * w, d)


@dataclass
class GroundTruthMask:
    """Binary anomaly mask at source-image resolution."""

    image_id: str
    mask: np.ndarray  # (H, W) uint8, values {0, 1}

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8)

    def validate(self) -> None:
        if self.mask.ndim != 2:
            raise ValueError("mask must be a 2-D grid")
        bad = ~np.isin(self.mask, (0, 1))
        if bad.any():
            raise ValueError("mask values must be 0 or 1")


@dataclass
class AnomalyMap:
    """Per-patch anomaly responses in (0, 1), with source dimensions for upsampling."""

    values: np.ndarray  # (H', W')
    source_height: int
    source_width: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def validate(self) -> None:
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("map values must form a non-empty 2-D grid")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite value in anomaly map")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("anomaly map values must lie in [0, 1]")
        if self.source_height < 1 or self.source_width < 1:
            raise ValueError("source dimensions must be positive")
