"""Shared numeric primitives: similarities, activations, convolution, top-k.

All operations are pure and accumulate in float64.  Feature grids are numpy
arrays of shape (height, width, channels) in row-major order.
"""

from __future__ import annotations

import numpy as np


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises ValueError on length mismatch or when either vector has zero norm
    (a zero embedding carries no direction and would poison downstream costs).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError("cosine_similarity expects two vectors of equal length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate vector: zero norm")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Rows scaled to unit L2 norm; raises on any zero-norm row."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if (norms == 0.0).any():
        raise ValueError("degenerate vector: zero norm")
    return m / norms[:, None]


def cosine_similarity_matrix(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, shape (n_queries, n_targets), clamped to [-1, 1]."""
    q = normalize_rows(queries)
    t = normalize_rows(targets)
    return np.clip(q @ t.T, -1.0, 1.0)


def softmax(logits) -> np.ndarray:
    """Probability vector via max-subtracted exponentials; preserves argmax."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax expects a non-empty vector")
    if not np.isfinite(x).all():
        raise ValueError("softmax expects finite logits")
    e = np.exp(x - x.max())
    return e / e.sum()


def row_softmax(matrix: np.ndarray) -> np.ndarray:
    """Softmax applied independently to each row of a 2-D array."""
    x = np.asarray(matrix, dtype=np.float64)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def top_k_indices(values, k: int) -> np.ndarray:
    """Indices of the k largest values, descending, ties broken by lower index.

    Exact under ties: the winner set keeps every value strictly above the k-th
    largest, then fills remaining slots with the lowest-indexed equal values.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("top_k_indices expects a vector")
    n = v.size
    if k < 0 or k > n:
        raise ValueError(f"k={k} out of range for {n} values")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k == n:
        idx = np.arange(n, dtype=np.int64)
    else:
        part = np.argpartition(-v, k - 1)[:k]
        boundary = v[part].min()
        strictly = np.flatnonzero(v > boundary)
        equal = np.flatnonzero(v == boundary)
        idx = np.concatenate([strictly, equal[: k - strictly.size]])
    order = np.lexsort((idx, -v[idx]))
    return idx[order].astype(np.int64)


def conv2d(grid: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution with zero padding and stride 1.

    grid:   (H, W, C_in)
    kernel: (k, k, C_in, C_out) with k odd
    bias:   (C_out,)
    """
    x = np.asarray(grid, dtype=np.float64)
    w = np.asarray(kernel, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError("conv2d expects grid (H,W,C_in) and kernel (k,k,C_in,C_out)")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    h, width, c_in = x.shape
    if w.shape[2] != c_in:
        raise ValueError(f"kernel expects {w.shape[2]} input channels, grid has {c_in}")
    c_out = w.shape[3]
    if b.shape != (c_out,):
        raise ValueError("bias length must equal output channels")
    cols = im2col(x, k)
    out = cols @ w.reshape(k * k * c_in, c_out) + b
    return out.reshape(h, width, c_out)


def im2col(grid: np.ndarray, k: int) -> np.ndarray:
    """Flattened receptive fields of a zero-padded grid, shape (H*W, k*k*C).

    Column order is (dy, dx, channel), matching kernel.reshape(k*k*C, -1).
    """
    h, w, c = grid.shape
    pad = (k - 1) // 2
    padded = np.pad(grid, ((pad, pad), (pad, pad), (0, 0)))
    blocks = [
        padded[dy : dy + h, dx : dx + w, :].reshape(h * w, c)
        for dy in range(k)
        for dx in range(k)
    ]
    return np.concatenate(blocks, axis=1)


def col2im_add(dcols: np.ndarray, k: int, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add flattened receptive-field gradients back."""
    pad = (k - 1) // 2
    dpadded = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=np.float64)
    i = 0
    for dy in range(k):
        for dx in range(k):
            dpadded[dy : dy + h, dx : dx + w, :] += dcols[:, i * c : (i + 1) * c].reshape(h, w, c)
            i += 1
    return dpadded[pad : pad + h, pad : pad + w, :]
