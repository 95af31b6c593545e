"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: explicit Python loops, no im2col, no
vectorized tricks, no code shared with the package under test.  Slow is fine;
these run on toy sizes only.
"""

from __future__ import annotations

import math

import numpy as np


def ref_cosine(a, b) -> float:
    num = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        num += float(x) * float(y)
        na += float(x) ** 2
        nb += float(y) ** 2
    return num / (math.sqrt(na) * math.sqrt(nb))


def ref_softmax(logits) -> np.ndarray:
    m = max(float(v) for v in logits)
    exps = [math.exp(float(v) - m) for v in logits]
    total = sum(exps)
    return np.array([e / total for e in exps])


def ref_conv2d(grid: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, c_in = grid.shape
    k = kernel.shape[0]
    c_out = kernel.shape[3]
    pad = (k - 1) // 2
    out = np.zeros((h, w, c_out))
    for y in range(h):
        for x in range(w):
            for co in range(c_out):
                acc = float(bias[co])
                for dy in range(k):
                    for dx in range(k):
                        yy = y + dy - pad
                        xx = x + dx - pad
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(c_in):
                                acc += float(grid[yy, xx, ci]) * float(kernel[dy, dx, ci, co])
                out[y, x, co] = acc
    return out


def ref_cross_attention(queries: np.ndarray, keys: np.ndarray, values: np.ndarray, scale: float):
    """Row-softmax attention: softmax(Q K^T * scale) V, via explicit loops."""
    n = queries.shape[0]
    m = keys.shape[0]
    attn = np.zeros((n, m))
    for i in range(n):
        scores = np.array(
            [sum(float(queries[i, d]) * float(keys[j, d]) for d in range(queries.shape[1])) * scale
             for j in range(m)]
        )
        attn[i] = ref_softmax(scores)
    out = np.zeros((n, values.shape[1]))
    for i in range(n):
        for c in range(values.shape[1]):
            out[i, c] = sum(attn[i, j] * float(values[j, c]) for j in range(m))
    return out, attn


def _ref_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def ref_filter_forward(params, g_q: np.ndarray, g_s: np.ndarray, cost: np.ndarray):
    """Straight-line reimplementation of the guided filter forward pass."""
    cfg = params.config
    h, w, d = g_q.shape
    n = h * w
    k_depth = cfg.volume_depth

    x = np.concatenate([g_q, g_s], axis=2)

    # Stage-1 router: 1x1 conv + global average pool + softmax.
    r1 = ref_conv2d(x, params.router1_weight, params.router1_bias)
    logits1 = np.array([r1[:, :, i].mean() for i in range(cfg.stage1_experts)])
    p1 = ref_softmax(logits1)

    # Sparse gate: keep top-k (ties to lower index), no renormalization.
    order = sorted(range(cfg.stage1_experts), key=lambda i: (-p1[i], i))
    kept = set(order[: cfg.active_experts])
    gate = np.array([p1[i] if i in kept else 0.0 for i in range(cfg.stage1_experts)])

    fused = np.zeros((h, w, 3 * d))
    for i in range(cfg.stage1_experts):
        if gate[i] == 0.0:
            continue
        conv_i = ref_conv2d(x, params.stage1_weights[i], params.stage1_biases[i])
        expert_out = np.concatenate([conv_i, x], axis=2)
        fused += gate[i] * expert_out

    cost_flat = cost.reshape(n, k_depth)
    y = np.concatenate([fused, cost], axis=2)
    r2 = ref_conv2d(y, params.router2_weight, params.router2_bias)
    logits2 = np.array([r2[:, :, i].mean() for i in range(cfg.stage2_experts)])
    p2 = ref_softmax(logits2)

    out = np.zeros((h, w))
    scale = 1.0 / math.sqrt(k_depth)
    for i, e in enumerate(params.experts):
        q = ref_conv2d(fused, e.query_weight, e.query_bias).reshape(n, k_depth)
        qp = q @ e.w_q
        kp = cost_flat @ e.w_k
        vp = cost_flat @ e.w_v
        att, attn = ref_cross_attention(qp, kp, vp, scale)
        hidden = ref_conv2d(cost, e.conf3_weight, e.conf3_bias)
        conf_pre = ref_conv2d(hidden, e.conf1_weight, e.conf1_bias).reshape(n, k_depth)
        conf = np.vectorize(_ref_sigmoid)(conf_pre)
        z = att + cfg.beta * (attn @ conf)
        expert_map = np.zeros((n,))
        for row in range(n):
            pre = float(e.out_bias[0])
            for c in range(k_depth):
                pre += z[row, c] * float(e.out_weight[0, 0, c, 0])
            expert_map[row] = _ref_sigmoid(pre)
        out += p2[i] * expert_map.reshape(h, w)
    return out


def brute_force_top_k(sims: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest values, descending, ties to lower index."""
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return order[:k]


def slow_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def slow_average_precision(scores, labels) -> float:
    thresholds = sorted(set(scores), reverse=True)
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp) if tp + fp else 0.0
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def slow_f1_max(scores, labels) -> float:
    thresholds = sorted(set(scores), reverse=True)
    n_pos = sum(labels)
    best = 0.0
    for t in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / n_pos
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return best


def slow_aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    """Literal threshold sweep: recompute overlaps per threshold by scanning."""
    from scipy import ndimage

    regions = []
    normals = []
    for pred, mask in zip(maps, masks):
        labeled, count = ndimage.label(np.asarray(mask) > 0, structure=np.ones((3, 3)))
        for r in range(1, count + 1):
            regions.append(np.asarray(pred)[labeled == r])
        normals.append(np.asarray(pred)[np.asarray(mask) == 0])
    normal = np.concatenate(normals)

    thresholds = sorted(set(float(v) for p in maps for v in np.asarray(p).ravel()), reverse=True)
    points = [(0.0, 0.0)]
    for t in thresholds:
        fpr = float(np.mean(normal >= t))
        pro = float(np.mean([np.mean(region >= t) for region in regions]))
        points.append((fpr, pro))

    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            if x1 > x0:
                y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / fpr_limit
