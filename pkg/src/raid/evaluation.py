"""Anomaly scoring and evaluation metrics.

Image score: mean of the top 1% largest map responses.  Metrics: exact
rank-based AUROC (pairwise probability form), average precision and maximum
F1 over descending-score threshold sweeps, and AUPRO (area under the mean
per-region overlap vs. false-positive-rate curve, integrated to an FPR cap
and normalized).  Pixel-level metrics pool all pixels across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .types import AnomalyMap

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EvalReport:
    image_auroc: float
    image_ap: float
    image_f1max: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    aupro: float
    image_scores: np.ndarray
    image_labels: np.ndarray

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("image_auroc", self.image_auroc),
            ("image_ap", self.image_ap),
            ("image_f1max", self.image_f1max),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_ap", self.pixel_ap),
            ("pixel_f1max", self.pixel_f1max),
            ("aupro", self.aupro),
        ]


def image_score(anomaly_map: AnomalyMap | np.ndarray) -> float:
    """Mean of the ceil(1%) largest responses (at least one)."""
    values = anomaly_map.values if isinstance(anomaly_map, AnomalyMap) else np.asarray(anomaly_map)
    flat = values.ravel()
    if flat.size == 0:
        raise ValueError("empty map")
    n_top = max(1, math.ceil(0.01 * flat.size))
    top = np.partition(flat, flat.size - n_top)[flat.size - n_top :]
    return float(top.mean())


def upsample_map(
    map_values: np.ndarray, target_height: int, target_width: int, sigma: float = 4.0
) -> np.ndarray:
    """Bilinear upsampling to source resolution, then Gaussian smoothing.

    Corners map to corners (align-corners convention), so an identity resize
    with sigma=0 returns the input unchanged.
    """
    values = np.asarray(map_values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("map must be 2-D")
    h, w = values.shape
    if target_height < 1 or target_width < 1:
        raise ValueError("target size must be positive")
    if target_height < h or target_width < w:
        raise ValueError("target size must not be smaller than the map")

    ys = np.linspace(0.0, h - 1.0, target_height) if target_height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, target_width) if target_width > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    out = (
        values[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + values[np.ix_(y0, x1)] * (1 - wy) * wx
        + values[np.ix_(y1, x0)] * wy * (1 - wx)
        + values[np.ix_(y1, x1)] * wy * wx
    )
    if sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=sigma)
    return out


def _check_binary_labels(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg), exact.

    Computed from midranks (Mann-Whitney U), which equals the brute-force
    pairwise count without any threshold grid.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    _check_binary_labels(y)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined metric: both classes must be present")
    ranks = _midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group midrank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _sweep_counts(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP at each distinct threshold, descending.

    Returns (thresholds, tp, fp) where entry t counts predictions with
    score >= thresholds[t].
    """
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    cum_tp = np.cumsum(y == 1)
    cum_fp = np.cumsum(y == 0)
    last_of_group = np.flatnonzero(np.diff(s) != 0)
    boundaries = np.concatenate([last_of_group, [s.size - 1]])
    return s[boundaries], cum_tp[boundaries], cum_fp[boundaries]


def average_precision(scores, labels) -> float:
    """Area under precision-recall via descending-score threshold sweep."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_binary_labels(y)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("no positives")
    _, tp, fp = _sweep_counts(s, y)
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, 1)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def f1_max(scores, labels) -> float:
    """Maximum F1 over every distinct-score threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_binary_labels(y)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("no positives")
    _, tp, fp = _sweep_counts(s, y)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2.0 * precision * recall / np.maximum(denom, 1e-300), 0.0)
    return float(f1.max())


def aupro(maps: list[np.ndarray], masks: list[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under the per-region-overlap curve up to an FPR cap, normalized.

    Regions are 8-connected components of each ground-truth mask.  The sweep
    walks every distinct prediction value descending (with an implicit empty
    prediction at the start); PRO at a threshold is the mean over regions of
    the fraction of region pixels predicted anomalous, FPR the fraction of
    normal pixels predicted anomalous.  The PRO-vs-FPR curve is integrated by
    trapezoid over [0, fpr_limit] (linearly interpolated at the cap) and
    divided by fpr_limit.
    """
    if len(maps) != len(masks) or not maps:
        raise ValueError("maps and masks must pair up")
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError("fpr_limit must lie in (0, 1]")

    region_values: list[np.ndarray] = []
    normal_values: list[np.ndarray] = []
    for pred, mask in zip(maps, masks):
        pred = np.asarray(pred, dtype=np.float64)
        mask = np.asarray(mask)
        if pred.shape != mask.shape:
            raise ValueError("prediction and mask shapes differ")
        labeled, count = ndimage.label(mask > 0, structure=EIGHT_CONNECTED)
        for region in range(1, count + 1):
            region_values.append(np.sort(pred[labeled == region], kind="stable"))
        normal_values.append(pred[mask == 0])
    if not region_values:
        raise ValueError("no anomalous pixels in the mask set")

    normal_sorted = np.sort(np.concatenate(normal_values), kind="stable")
    n_normal = normal_sorted.size
    if n_normal == 0:
        raise ValueError("no normal pixels; FPR undefined")

    all_values = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in maps])
    thresholds = np.unique(all_values)[::-1]
    # Counts of values >= t via searchsorted on ascending sorted arrays.
    fpr = 1.0 - np.searchsorted(normal_sorted, thresholds, side="left") / n_normal
    pro = np.zeros_like(thresholds)
    for values in region_values:
        pro += 1.0 - np.searchsorted(values, thresholds, side="left") / values.size
    pro /= len(region_values)

    fpr = np.concatenate([[0.0], fpr])
    pro = np.concatenate([[0.0], pro])
    return _clipped_trapezoid(fpr, pro, fpr_limit) / fpr_limit


def _clipped_trapezoid(x: np.ndarray, y: np.ndarray, x_limit: float) -> float:
    """Trapezoid integral of a piecewise-linear curve over [0, x_limit]."""
    area = 0.0
    for i in range(1, x.size):
        x0, x1 = x[i - 1], x[i]
        y0, y1 = y[i - 1], y[i]
        if x0 >= x_limit:
            break
        if x1 > x_limit:
            if x1 > x0:
                y1 = y0 + (y1 - y0) * (x_limit - x0) / (x1 - x0)
            x1 = x_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return float(area)


def evaluate_run(
    maps: list[AnomalyMap],
    masks: list[np.ndarray],
    image_labels: list[int] | None = None,
    fpr_limit: float = 0.3,
    smoothing_sigma: float = 4.0,
) -> EvalReport:
    """All metrics at both levels for a set of maps and source-resolution masks.

    image_labels defaults to mask.any() per image.  Pixel metrics are computed
    on maps upsampled to each mask's resolution, pooled across images.
    """
    if len(maps) != len(masks) or not maps:
        raise ValueError("maps and masks must pair up")
    masks = [np.asarray(m) for m in masks]
    if image_labels is None:
        image_labels = [int(m.any()) for m in masks]
    labels = np.asarray(image_labels)

    scores = np.array([image_score(m) for m in maps])
    img_auroc = auroc(scores, labels)
    img_ap = average_precision(scores, labels)
    img_f1 = f1_max(scores, labels)

    upsampled = []
    for anomaly_map, mask in zip(maps, masks):
        if mask.shape != (anomaly_map.source_height, anomaly_map.source_width):
            raise ValueError("mask resolution does not match the map's source size")
        upsampled.append(
            upsample_map(anomaly_map.values, mask.shape[0], mask.shape[1], smoothing_sigma)
        )
    pixel_scores = np.concatenate([u.ravel() for u in upsampled])
    pixel_labels = np.concatenate([m.ravel() for m in masks]).astype(int)
    return EvalReport(
        image_auroc=img_auroc,
        image_ap=img_ap,
        image_f1max=img_f1,
        pixel_auroc=auroc(pixel_scores, pixel_labels),
        pixel_ap=average_precision(pixel_scores, pixel_labels),
        pixel_f1max=f1_max(pixel_scores, pixel_labels),
        aupro=aupro(upsampled, masks, fpr_limit),
        image_scores=scores,
        image_labels=labels,
    )
