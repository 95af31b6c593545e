"""Filter training: synthetic anomalies, losses, analytic gradients, Adam loop.

Anomaly synthesis operates in token space: a rectangle of grid cells is
blended toward tokens drawn from a foreign template, producing exactly the
cost-volume perturbations the filter must learn to flag.  Gradients are
hand-derived backpropagation through the full filter; their contract is
agreement with central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .database import HierarchicalDatabase
from .moe_filter import FilterConfig, FilterParameters, _backward, _forward, normalize_grid
from .numerics import cosine_similarity
from .retrieval import build_cost_volume, hierarchical_retrieve, retrieve_class
from .types import TokenEmbeddingSet

_PROB_FLOOR = 1e-12  # keeps the focal log away from 0 at extreme saturation


@dataclass
class AnomalyConfig:
    min_area: float = 0.02
    max_area: float = 0.25
    alpha_range: tuple[float, float] = (0.5, 1.0)
    # A drawn foreign token this similar to the cell it replaces is redrawn
    # (up to max_redraws); keeps corruptions meaningful when the foreign
    # template shares appearance modes with the corrupted one.
    max_foreign_similarity: float = 0.9
    max_redraws: int = 8


@dataclass
class TrainingSample:
    embedding_set: TokenEmbeddingSet  # corrupted query
    mask: np.ndarray                  # (H', W') uint8, 1 on corrupted cells
    source_template_id: str


@dataclass
class LossBreakdown:
    focal: float
    balance: float
    total: float
    lambda_bal: float


@dataclass
class FilterSample:
    """One ready-to-filter training item (all grids in token space)."""

    query_grid: np.ndarray      # (H', W', D)
    prototype_grid: np.ndarray  # (H', W', D)
    cost_values: np.ndarray     # (H', W', K)
    mask: np.ndarray            # (H', W') uint8


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    k_prime: int = 5
    k: int = 150
    lambda_bal: float = 0.005
    focal_gamma: float = 2.0
    focal_alpha: float = 0.75
    stage1_experts: int = 3
    stage2_experts: int = 3
    active_experts: int = 2
    beta: float = 0.1
    # Fraction of samples left uncorrupted (all-zero mask).  Without them the
    # filter only ever sees images that contain an anomaly and drifts into a
    # purely relative within-image contrast detector.
    clean_probability: float = 0.25
    # Cosine decay of the learning rate down to this value; None keeps it
    # constant for the whole run.
    final_learning_rate: float | None = None
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)


def inject_anomaly(
    template: TokenEmbeddingSet,
    foreign_templates: list[TokenEmbeddingSet],
    seed: int,
    config: AnomalyConfig | None = None,
) -> TrainingSample:
    """Blend a rectangle of cells toward tokens from a foreign template.

    The rectangle covers between min_area and max_area of the grid; inside it
    each token becomes (1 - alpha) * original + alpha * foreign with one alpha
    drawn from alpha_range.  Cells outside the rectangle are untouched.
    """
    config = config or AnomalyConfig()
    if not foreign_templates:
        raise ValueError("need at least one foreign template")
    h, w = template.grid_height, template.grid_width
    if h * w < 4:
        raise ValueError("grid too small for anomaly injection")
    rng = np.random.default_rng(seed)

    total = h * w
    for _ in range(10_000):
        rh = int(rng.integers(1, h + 1))
        rw = int(rng.integers(1, w + 1))
        frac = rh * rw / total
        if config.min_area <= frac <= config.max_area:
            break
    else:
        raise ValueError("could not sample a rectangle within the area bounds")
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))

    foreign = foreign_templates[int(rng.integers(len(foreign_templates)))]
    alpha = float(rng.uniform(*config.alpha_range))

    corrupted = template.patch_tokens.astype(np.float64).copy()
    mask = np.zeros((h, w), dtype=np.uint8)
    fh, fw = foreign.grid_height, foreign.grid_width
    for y in range(y0, y0 + rh):
        for x in range(x0, x0 + rw):
            original = corrupted[y, x]
            candidate = None
            for _ in range(max(1, config.max_redraws)):
                fy = int(rng.integers(fh))
                fx = int(rng.integers(fw))
                candidate = foreign.patch_tokens[fy, fx].astype(np.float64)
                sim = cosine_similarity(original, candidate)
                if sim < config.max_foreign_similarity:
                    break
            corrupted[y, x] = (1.0 - alpha) * original + alpha * candidate
            mask[y, x] = 1

    corrupted_set = TokenEmbeddingSet(
        image_id=f"{template.image_id}+synthetic",
        cls_token=template.cls_token.copy(),
        patch_tokens=corrupted.astype(np.float32),
        source_height=template.source_height,
        source_width=template.source_width,
        class_label=template.class_label,
    )
    return TrainingSample(
        embedding_set=corrupted_set, mask=mask, source_template_id=template.image_id
    )


def _focal_terms(map_values: np.ndarray, mask: np.ndarray, alpha: float):
    anomalous = mask.astype(bool)
    p_raw = np.where(anomalous, map_values, 1.0 - map_values)
    p_t = np.clip(p_raw, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    interior = (p_raw >= _PROB_FLOOR) & (p_raw <= 1.0 - _PROB_FLOOR)
    a_t = np.where(anomalous, alpha, 1.0 - alpha)
    return p_t, a_t, anomalous, interior


def _focal_value(map_values: np.ndarray, mask: np.ndarray, gamma: float, alpha: float) -> float:
    p_t, a_t, _, _ = _focal_terms(map_values, mask, alpha)
    return float(np.mean(-a_t * (1.0 - p_t) ** gamma * np.log(p_t)))


def focal_loss(map_values, mask, gamma: float = 2.0, alpha: float = 0.75) -> float:
    """Mean of -a_t * (1 - p_t)^gamma * log(p_t) over all grid cells."""
    m = np.asarray(map_values, dtype=np.float64)
    mask = np.asarray(mask)
    if m.shape != mask.shape:
        raise ValueError("map and mask shapes differ")
    if m.min() <= 0.0 or m.max() >= 1.0:
        raise ValueError("map values must lie strictly inside (0, 1)")
    return _focal_value(m, mask, gamma, alpha)


def focal_loss_gradient(map_values, mask, gamma: float = 2.0, alpha: float = 0.75) -> np.ndarray:
    """d(focal_loss)/d(map values), same shape as the map.

    Zero where the probability clamp is active, mirroring the forward value.
    """
    m = np.asarray(map_values, dtype=np.float64)
    mask = np.asarray(mask)
    p_t, a_t, anomalous, interior = _focal_terms(m, mask, alpha)
    one_minus = 1.0 - p_t
    if gamma == 0.0:
        d_pt = -a_t / p_t
    else:
        d_pt = -a_t * (-gamma * one_minus ** (gamma - 1.0) * np.log(p_t) + one_minus**gamma / p_t)
    sign = np.where(anomalous, 1.0, -1.0)
    return np.where(interior, d_pt * sign, 0.0) / m.size


def balance_loss(gate_probabilities: np.ndarray, active_sets: np.ndarray) -> float:
    """Load-balance penalty M * sum_i f_i * P_i over the sparse router.

    gate_probabilities: (B, M) softmax outputs per sample.
    active_sets:        (B, M) booleans marking each sample's top-k experts.

    f_i is the fraction of samples activating expert i divided by k, P_i the
    mean gate probability.  Uniform routing gives exactly 1.0; any skew
    exceeds it.
    """
    probs = np.asarray(gate_probabilities, dtype=np.float64)
    active = np.asarray(active_sets, dtype=bool)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need at least one sample of gate probabilities")
    if active.shape != probs.shape:
        raise ValueError("active sets must align with gate probabilities")
    m = probs.shape[1]
    k = int(active[0].sum())
    f = active.mean(axis=0) / k
    p_mean = probs.mean(axis=0)
    return float(m * (f * p_mean).sum())


def total_loss(
    maps: list[np.ndarray],
    masks: list[np.ndarray],
    gate_probabilities: np.ndarray,
    active_sets: np.ndarray,
    lambda_bal: float = 0.005,
    gamma: float = 2.0,
    alpha: float = 0.75,
) -> LossBreakdown:
    """Batch loss: mean focal term plus lambda_bal times the balance term."""
    if len(maps) != len(masks) or not maps:
        raise ValueError("maps and masks must pair up")
    focal = float(np.mean([focal_loss(m, s, gamma, alpha) for m, s in zip(maps, masks)]))
    balance = balance_loss(gate_probabilities, active_sets)
    return LossBreakdown(
        focal=focal,
        balance=balance,
        total=focal + lambda_bal * balance,
        lambda_bal=lambda_bal,
    )


def loss_gradient(
    params: FilterParameters,
    batch: list[FilterSample],
    lambda_bal: float = 0.005,
    gamma: float = 2.0,
    alpha: float = 0.75,
):
    """Analytic gradient of the batch loss for every parameter tensor.

    Returns (grads dict keyed like param_items, LossBreakdown).
    """
    if not batch:
        raise ValueError("empty batch")
    b = len(batch)
    m1 = params.config.stage1_experts

    forwards = []
    probs = np.zeros((b, m1))
    active_sets = np.zeros((b, m1), dtype=bool)
    for idx, sample in enumerate(batch):
        values, cache = _forward(params, sample.query_grid, sample.prototype_grid, sample.cost_values)
        forwards.append((values, cache))
        probs[idx] = cache["p1"]
        active_sets[idx, cache["active"]] = True

    focal = float(
        np.mean([_focal_value(values, s.mask, gamma, alpha) for (values, _), s in zip(forwards, batch)])
    )
    balance = balance_loss(probs, active_sets)
    breakdown = LossBreakdown(
        focal=focal, balance=balance, total=focal + lambda_bal * balance, lambda_bal=lambda_bal
    )

    k_active = int(active_sets[0].sum())
    f = active_sets.mean(axis=0) / k_active
    d_p1_extra = lambda_bal * m1 * f / b

    grads = params.zero_grads()
    for (values, cache), sample in zip(forwards, batch):
        d_map = focal_loss_gradient(values, sample.mask, gamma, alpha) / b
        sample_grads = _backward(params, cache, d_map, d_p1_extra)
        for name in grads:
            grads[name] += sample_grads[name]
        if not np.all([np.isfinite(g).all() for g in sample_grads.values()]):
            bad = [n for n, g in sample_grads.items() if not np.isfinite(g).all()]
            raise ValueError(f"non-finite gradient in {bad[0]}")
    return grads, breakdown


class AdamState:
    """Adam moment estimates for a FilterParameters instance."""

    def __init__(self, params: FilterParameters, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t) for name, t in params.param_items()}
        self.v = {name: np.zeros_like(t) for name, t in params.param_items()}

    def step(self, params: FilterParameters, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        for name, tensor in params.param_items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1**t)
            v_hat = self.v[name] / (1.0 - self.beta2**t)
            tensor -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def prepare_sample(
    sample: TrainingSample,
    db: HierarchicalDatabase,
    k_prime: int,
    k: int,
) -> FilterSample:
    """Retrieve and build the cost volume for one training sample."""
    rr = hierarchical_retrieve(sample.embedding_set, db, k_prime, k)
    cost = build_cost_volume(rr, sample.embedding_set)
    return FilterSample(
        query_grid=normalize_grid(sample.embedding_set.patch_tokens.astype(np.float64)),
        prototype_grid=normalize_grid(rr.prototypes.astype(np.float64)),
        cost_values=cost.values,
        mask=sample.mask,
    )


def train_filter(
    templates: list[TokenEmbeddingSet],
    db: HierarchicalDatabase,
    config: TrainConfig,
) -> tuple[FilterParameters, list[LossBreakdown]]:
    """Train the filter on synthetic anomalies injected into the templates.

    Deterministic given config.seed.  Returns the trained parameters and the
    per-epoch mean loss history.
    """
    if not templates:
        raise ValueError("no templates")
    k = min(config.k, min(db.class_token_count(c) for c in range(db.num_classes) if db.class_token_count(c) > 0))
    filter_config = FilterConfig(
        dim=templates[0].dim,
        volume_depth=k,
        stage1_experts=config.stage1_experts,
        stage2_experts=config.stage2_experts,
        active_experts=config.active_experts,
        beta=config.beta,
    )
    params = FilterParameters.initialize(filter_config, seed=config.seed)
    adam = AdamState(params)
    rng = np.random.default_rng(config.seed)

    # Foreign pools for injection: prefer templates of a different class.
    classes = [retrieve_class(t.cls_token, db) for t in templates]
    pools = []
    for i, t in enumerate(templates):
        foreign = [templates[j] for j in range(len(templates)) if classes[j] != classes[i]]
        if not foreign:
            foreign = [templates[j] for j in range(len(templates)) if j != i] or [t]
        pools.append(foreign)

    history: list[LossBreakdown] = []
    for epoch in range(config.epochs):
        if config.final_learning_rate is None or config.epochs == 1:
            lr = config.learning_rate
        else:
            progress = epoch / (config.epochs - 1)
            lr = config.final_learning_rate + 0.5 * (
                config.learning_rate - config.final_learning_rate
            ) * (1.0 + np.cos(np.pi * progress))
        order = rng.permutation(len(templates))
        epoch_focal, epoch_balance, epoch_total, batches = 0.0, 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch = []
            for t_idx in chunk:
                sample_seed = int(rng.integers(2**63))
                keep_clean = rng.uniform() < config.clean_probability
                if keep_clean:
                    template = templates[t_idx]
                    sample = TrainingSample(
                        embedding_set=template,
                        mask=np.zeros((template.grid_height, template.grid_width), dtype=np.uint8),
                        source_template_id=template.image_id,
                    )
                else:
                    sample = inject_anomaly(
                        templates[t_idx], pools[t_idx], sample_seed, config.anomaly
                    )
                batch.append(prepare_sample(sample, db, config.k_prime, k))
            grads, loss = loss_gradient(
                params, batch, config.lambda_bal, config.focal_gamma, config.focal_alpha
            )
            adam.step(params, grads, lr)
            epoch_focal += loss.focal
            epoch_balance += loss.balance
            epoch_total += loss.total
            batches += 1
        history.append(
            LossBreakdown(
                focal=epoch_focal / batches,
                balance=epoch_balance / batches,
                total=epoch_total / batches,
                lambda_bal=config.lambda_bal,
            )
        )
    return params, history
