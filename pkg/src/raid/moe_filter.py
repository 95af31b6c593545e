"""Guided mixture-of-experts filter over anomaly cost volumes.

Two stages:

  Stage 1 (sparse routing): query-token and retained-prototype grids are
  concatenated (2D channels); a router (1x1 conv, global average pool,
  softmax) picks the top-k of M1 guidance experts, each a residual block
  whose 3x3 conv output (D channels) is concatenated back onto its input,
  giving a fused guidance grid with 3D channels.  Kept gate values are NOT
  renormalized.

  Stage 2 (dense routing): each of M2 denoising experts refines the cost
  volume with a cross-attention branch (guidance projected to queries, cost
  rows as keys/values) plus a confidence branch (two convs + sigmoid over the
  cost volume) whose response modulates the attention output scaled by beta.
  A dense router on concat(guidance, cost) mixes the expert maps into the
  final single-channel anomaly map.

Routing is per image: router convs are pooled over all spatial positions
before the softmax, so each image receives one gate vector per stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import col2im_add, im2col, row_softmax, sigmoid, softmax, top_k_indices
from .types import AnomalyMap, TokenEmbeddingSet


@dataclass(frozen=True)
class FilterConfig:
    dim: int                 # D, token dimension
    volume_depth: int        # K, retrieved candidates per patch
    stage1_experts: int = 3  # M1
    stage2_experts: int = 3  # M2
    active_experts: int = 2  # top-k kept by the sparse stage-1 gate
    beta: float = 0.1        # weight of the confidence modulation term

    def validate(self) -> None:
        if self.dim < 1 or self.volume_depth < 1:
            raise ValueError("dim and volume_depth must be positive")
        if self.stage1_experts < 1 or self.stage2_experts < 1:
            raise ValueError("expert counts must be positive")
        if not (1 <= self.active_experts <= self.stage1_experts):
            raise ValueError("active_experts must lie in [1, stage1_experts]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class Stage2Expert:
    query_weight: np.ndarray   # (3, 3, 3D, K)
    query_bias: np.ndarray     # (K,)
    w_q: np.ndarray            # (K, K)
    w_k: np.ndarray            # (K, K)
    w_v: np.ndarray            # (K, K)
    conf3_weight: np.ndarray   # (3, 3, K, K)
    conf3_bias: np.ndarray     # (K,)
    conf1_weight: np.ndarray   # (1, 1, K, K)
    conf1_bias: np.ndarray     # (K,)
    out_weight: np.ndarray     # (1, 1, K, 1)
    out_bias: np.ndarray       # (1,)


@dataclass
class FilterParameters:
    """Every learnable tensor of the guided filter, float64 in memory."""

    config: FilterConfig
    router1_weight: np.ndarray          # (1, 1, 2D, M1)
    router1_bias: np.ndarray            # (M1,)
    stage1_weights: list[np.ndarray]    # per expert: (3, 3, 2D, D)
    stage1_biases: list[np.ndarray]     # per expert: (D,)
    router2_weight: np.ndarray          # (1, 1, 3D + K, M2)
    router2_bias: np.ndarray            # (M2,)
    experts: list[Stage2Expert] = field(default_factory=list)

    @classmethod
    def zeros(cls, config: FilterConfig) -> "FilterParameters":
        config.validate()
        d, k = config.dim, config.volume_depth
        return cls(
            config=config,
            router1_weight=np.zeros((1, 1, 2 * d, config.stage1_experts)),
            router1_bias=np.zeros(config.stage1_experts),
            stage1_weights=[np.zeros((3, 3, 2 * d, d)) for _ in range(config.stage1_experts)],
            stage1_biases=[np.zeros(d) for _ in range(config.stage1_experts)],
            router2_weight=np.zeros((1, 1, 3 * d + k, config.stage2_experts)),
            router2_bias=np.zeros(config.stage2_experts),
            experts=[
                Stage2Expert(
                    query_weight=np.zeros((3, 3, 3 * d, k)),
                    query_bias=np.zeros(k),
                    w_q=np.zeros((k, k)),
                    w_k=np.zeros((k, k)),
                    w_v=np.zeros((k, k)),
                    conf3_weight=np.zeros((3, 3, k, k)),
                    conf3_bias=np.zeros(k),
                    conf1_weight=np.zeros((1, 1, k, k)),
                    conf1_bias=np.zeros(k),
                    out_weight=np.zeros((1, 1, k, 1)),
                    out_bias=np.zeros(1),
                )
                for _ in range(config.stage2_experts)
            ],
        )

    @classmethod
    def initialize(cls, config: FilterConfig, seed: int) -> "FilterParameters":
        """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero."""
        params = cls.zeros(config)
        rng = np.random.default_rng(seed)
        for name, tensor in params.param_items():
            if name.endswith("bias"):
                continue
            if tensor.ndim == 4:
                fan_in = tensor.shape[0] * tensor.shape[1] * tensor.shape[2]
            else:
                fan_in = tensor.shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            tensor[...] = rng.uniform(-bound, bound, size=tensor.shape)
        return params

    def param_items(self):
        """(name, tensor) pairs in the declared serialization order."""
        yield "router1.weight", self.router1_weight
        yield "router1.bias", self.router1_bias
        for i in range(self.config.stage1_experts):
            yield f"stage1.{i}.conv.weight", self.stage1_weights[i]
            yield f"stage1.{i}.conv.bias", self.stage1_biases[i]
        yield "router2.weight", self.router2_weight
        yield "router2.bias", self.router2_bias
        for i, e in enumerate(self.experts):
            yield f"stage2.{i}.query.weight", e.query_weight
            yield f"stage2.{i}.query.bias", e.query_bias
            yield f"stage2.{i}.w_q", e.w_q
            yield f"stage2.{i}.w_k", e.w_k
            yield f"stage2.{i}.w_v", e.w_v
            yield f"stage2.{i}.conf3.weight", e.conf3_weight
            yield f"stage2.{i}.conf3.bias", e.conf3_bias
            yield f"stage2.{i}.conf1.weight", e.conf1_weight
            yield f"stage2.{i}.conf1.bias", e.conf1_bias
            yield f"stage2.{i}.out.weight", e.out_weight
            yield f"stage2.{i}.out.bias", e.out_bias

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(tensor) for name, tensor in self.param_items()}


def normalize_grid(grid: np.ndarray) -> np.ndarray:
    """Scale each cell's vector to unit L2 norm.

    The matching pipeline is cosine-based, so token magnitudes carry no
    signal; normalizing keeps router and attention logits well-scaled for
    any embedding backbone.
    """
    g = np.asarray(grid, dtype=np.float64)
    norms = np.linalg.norm(g, axis=2, keepdims=True)
    return g / np.maximum(norms, 1e-30)


def sparse_gate(probabilities, k: int) -> np.ndarray:
    """Keep the k largest entries unchanged, zero the rest (no renormalization)."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("sparse_gate expects a probability vector")
    if k > p.size:
        raise ValueError(f"k={k} exceeds {p.size} experts")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1")
    kept = top_k_indices(p, k)
    gated = np.zeros_like(p)
    gated[kept] = p[kept]
    return gated


def _router_logits(flat_input: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1x1 conv followed by global average pooling, on flattened positions."""
    c = weight.shape[2]
    return flat_input.mean(axis=0) @ weight.reshape(c, -1) + bias


def _forward(params: FilterParameters, g_q: np.ndarray, g_s: np.ndarray, cost: np.ndarray):
    """Full forward pass; returns (map_values (H,W), cache dict)."""
    cfg = params.config
    g_q = np.asarray(g_q, dtype=np.float64)
    g_s = np.asarray(g_s, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if g_q.ndim != 3 or g_s.shape != g_q.shape:
        raise ValueError("query and prototype grids must share shape (H, W, D)")
    h, w, d = g_q.shape
    if d != cfg.dim:
        raise ValueError(f"grid channels {d} do not match filter dim {cfg.dim}")
    if cost.shape[:2] != (h, w):
        raise ValueError("cost volume spatial size must match the guidance grids")
    if cost.shape[2] != cfg.volume_depth:
        raise ValueError(
            f"cost volume depth {cost.shape[2]} does not match filter K {cfg.volume_depth}"
        )
    n = h * w
    k_depth = cfg.volume_depth

    # Stage 1: sparse-routed guidance fusion.
    x = np.concatenate([g_q, g_s], axis=2)          # (H, W, 2D)
    x_flat = x.reshape(n, 2 * d)
    logits1 = _router_logits(x_flat, params.router1_weight, params.router1_bias)
    p1 = softmax(logits1)
    active = top_k_indices(p1, cfg.active_experts)
    gate = np.zeros_like(p1)
    gate[active] = p1[active]

    cols_x3 = im2col(x, 3)                          # (N, 9*2D)
    expert1_outs: dict[int, np.ndarray] = {}
    fused_flat = np.zeros((n, 3 * d))
    for i in active:
        conv_i = cols_x3 @ params.stage1_weights[i].reshape(-1, d) + params.stage1_biases[i]
        out_i = np.concatenate([conv_i, x_flat], axis=1)   # (N, 3D)
        expert1_outs[int(i)] = out_i
        fused_flat += gate[i] * out_i
    fused = fused_flat.reshape(h, w, 3 * d)

    # Stage 2: dense-routed denoising experts.
    cost_flat = cost.reshape(n, k_depth)
    y_flat = np.concatenate([fused_flat, cost_flat], axis=1)
    logits2 = _router_logits(y_flat, params.router2_weight, params.router2_bias)
    p2 = softmax(logits2)

    cols_f3 = im2col(fused, 3)                      # (N, 9*3D)
    cols_c3 = im2col(cost, 3)                       # (N, 9*K)
    scale = 1.0 / math.sqrt(k_depth)
    expert_data = []
    map_flat = np.zeros((n, 1))
    for i, e in enumerate(params.experts):
        q = cols_f3 @ e.query_weight.reshape(-1, k_depth) + e.query_bias
        qp = q @ e.w_q
        kp = cost_flat @ e.w_k
        vp = cost_flat @ e.w_v
        scores = qp @ kp.T * scale
        attn = row_softmax(scores)                  # (N, N)
        att_out = attn @ vp
        hidden = cols_c3 @ e.conf3_weight.reshape(-1, k_depth) + e.conf3_bias
        conf_pre = hidden @ e.conf1_weight.reshape(k_depth, k_depth) + e.conf1_bias
        conf = sigmoid(conf_pre)                    # (N, K)
        z = att_out + cfg.beta * (attn @ conf)
        pre = z @ e.out_weight.reshape(k_depth, 1) + e.out_bias
        c_map = sigmoid(pre)                        # (N, 1)
        map_flat += p2[i] * c_map
        expert_data.append(
            dict(q=q, qp=qp, kp=kp, vp=vp, attn=attn, att_out=att_out,
                 hidden=hidden, conf=conf, z=z, c_map=c_map)
        )

    cache = dict(
        h=h, w=w, d=d, n=n, k=k_depth,
        x_flat=x_flat, cols_x3=cols_x3,
        logits1=logits1, p1=p1, gate=gate, active=active,
        expert1_outs=expert1_outs, fused_flat=fused_flat,
        cost_flat=cost_flat, y_flat=y_flat,
        logits2=logits2, p2=p2,
        cols_f3=cols_f3, cols_c3=cols_c3, scale=scale,
        experts=expert_data, map_flat=map_flat,
    )
    return map_flat.reshape(h, w), cache


def _backward(
    params: FilterParameters,
    cache: dict,
    d_map: np.ndarray,
    d_p1_extra: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with upstream d_map = dL/d(map values).

    d_p1_extra adds a direct upstream gradient on the stage-1 routing
    probabilities (used by the load-balance loss).
    """
    cfg = params.config
    n, d, k_depth = cache["n"], cache["d"], cache["k"]
    h, w = cache["h"], cache["w"]
    grads = params.zero_grads()

    d_map_flat = np.asarray(d_map, dtype=np.float64).reshape(n, 1)
    p2 = cache["p2"]
    cost_flat = cache["cost_flat"]
    cols_f3 = cache["cols_f3"]
    cols_c3 = cache["cols_c3"]
    scale = cache["scale"]

    dp2 = np.zeros_like(p2)
    dcols_f3 = np.zeros_like(cols_f3)

    for i, e in enumerate(params.experts):
        data = cache["experts"][i]
        c_map = data["c_map"]
        dp2[i] = float((d_map_flat * c_map).sum())
        dc = p2[i] * d_map_flat
        dpre = dc * c_map * (1.0 - c_map)

        z = data["z"]
        grads[f"stage2.{i}.out.weight"] += (z.T @ dpre).reshape(1, 1, k_depth, 1)
        grads[f"stage2.{i}.out.bias"] += dpre.sum(axis=0)
        dz = dpre @ e.out_weight.reshape(k_depth, 1).T

        attn, conf, vp = data["attn"], data["conf"], data["vp"]
        datt = dz
        dattn = datt @ vp.T + cfg.beta * (dz @ conf.T)
        dvp = attn.T @ datt
        dconf = cfg.beta * (attn.T @ dz)

        dconf_pre = dconf * conf * (1.0 - conf)
        hidden = data["hidden"]
        grads[f"stage2.{i}.conf1.weight"] += (hidden.T @ dconf_pre).reshape(1, 1, k_depth, k_depth)
        grads[f"stage2.{i}.conf1.bias"] += dconf_pre.sum(axis=0)
        dhidden = dconf_pre @ e.conf1_weight.reshape(k_depth, k_depth).T
        grads[f"stage2.{i}.conf3.weight"] += (cols_c3.T @ dhidden).reshape(3, 3, k_depth, k_depth)
        grads[f"stage2.{i}.conf3.bias"] += dhidden.sum(axis=0)

        dscores = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
        qp, kp, q = data["qp"], data["kp"], data["q"]
        dqp = dscores @ kp * scale
        dkp = dscores.T @ qp * scale
        grads[f"stage2.{i}.w_q"] += q.T @ dqp
        grads[f"stage2.{i}.w_k"] += cost_flat.T @ dkp
        grads[f"stage2.{i}.w_v"] += cost_flat.T @ dvp
        dq = dqp @ e.w_q.T
        grads[f"stage2.{i}.query.weight"] += (cols_f3.T @ dq).reshape(3, 3, 3 * d, k_depth)
        grads[f"stage2.{i}.query.bias"] += dq.sum(axis=0)
        dcols_f3 += dq @ e.query_weight.reshape(-1, k_depth).T

    # Stage-2 router.
    dlogits2 = p2 * (dp2 - float((dp2 * p2).sum()))
    y_flat = cache["y_flat"]
    grads["router2.weight"] += np.outer(y_flat.mean(axis=0), dlogits2).reshape(
        1, 1, 3 * d + k_depth, cfg.stage2_experts
    )
    grads["router2.bias"] += dlogits2
    dy_flat = np.tile(dlogits2 / n, (n, 1)) @ params.router2_weight.reshape(-1, cfg.stage2_experts).T

    # Accumulate into the fused guidance.
    dfused_flat = col2im_add(dcols_f3, 3, h, w, 3 * d).reshape(n, 3 * d)
    dfused_flat += dy_flat[:, : 3 * d]

    # Stage-1 experts and router.
    gate = cache["gate"]
    active = cache["active"]
    cols_x3 = cache["cols_x3"]
    dgate = np.zeros_like(gate)
    for i in active:
        out_i = cache["expert1_outs"][int(i)]
        dgate[i] = float((dfused_flat * out_i).sum())
        dconv = gate[i] * dfused_flat[:, :d]
        grads[f"stage1.{i}.conv.weight"] += (cols_x3.T @ dconv).reshape(3, 3, 2 * d, d)
        grads[f"stage1.{i}.conv.bias"] += dconv.sum(axis=0)

    dp1 = dgate  # gate is identity on kept entries, zero elsewhere
    if d_p1_extra is not None:
        dp1 = dp1 + np.asarray(d_p1_extra, dtype=np.float64)
    p1 = cache["p1"]
    dlogits1 = p1 * (dp1 - float((dp1 * p1).sum()))
    x_flat = cache["x_flat"]
    grads["router1.weight"] += np.outer(x_flat.mean(axis=0), dlogits1).reshape(
        1, 1, 2 * d, cfg.stage1_experts
    )
    grads["router1.bias"] += dlogits1
    return grads


def fuse_guidance(query_grid, prototype_grid, params: FilterParameters):
    """Stage-1 fusion; returns (fused grid (H,W,3D), probabilities, gates)."""
    g_q = np.asarray(query_grid, dtype=np.float64)
    g_s = np.asarray(prototype_grid, dtype=np.float64)
    if g_q.shape != g_s.shape or g_q.ndim != 3:
        raise ValueError("query and prototype grids must share shape (H, W, D)")
    h, w, d = g_q.shape
    if d != params.config.dim:
        raise ValueError("grid channels do not match filter dim")
    n = h * w
    x_flat = np.concatenate([g_q, g_s], axis=2).reshape(n, 2 * d)
    logits1 = _router_logits(x_flat, params.router1_weight, params.router1_bias)
    p1 = softmax(logits1)
    gate = sparse_gate(p1, params.config.active_experts)
    cols_x3 = im2col(np.concatenate([g_q, g_s], axis=2), 3)
    fused_flat = np.zeros((n, 3 * d))
    for i in np.flatnonzero(gate):
        conv_i = cols_x3 @ params.stage1_weights[i].reshape(-1, d) + params.stage1_biases[i]
        fused_flat += gate[i] * np.concatenate([conv_i, x_flat], axis=1)
    return fused_flat.reshape(h, w, 3 * d), p1, gate


def denoise_expert(fused, cost_values, params: FilterParameters, expert_index: int):
    """One stage-2 expert; returns (refined map (H,W), attention (N,N), confidence (H,W,K))."""
    cfg = params.config
    fused = np.asarray(fused, dtype=np.float64)
    cost = np.asarray(cost_values, dtype=np.float64)
    if fused.ndim != 3 or cost.ndim != 3 or fused.shape[:2] != cost.shape[:2]:
        raise ValueError("fused guidance and cost volume must share spatial size")
    if fused.shape[2] != 3 * cfg.dim:
        raise ValueError("fused guidance must have 3D channels")
    if cost.shape[2] != cfg.volume_depth:
        raise ValueError("cost volume depth does not match filter K")
    e = params.experts[expert_index]
    h, w = cost.shape[:2]
    n = h * w
    k_depth = cfg.volume_depth
    cost_flat = cost.reshape(n, k_depth)
    q = im2col(fused, 3) @ e.query_weight.reshape(-1, k_depth) + e.query_bias
    scores = (q @ e.w_q) @ (cost_flat @ e.w_k).T / math.sqrt(k_depth)
    attn = row_softmax(scores)
    att_out = attn @ (cost_flat @ e.w_v)
    hidden = im2col(cost, 3) @ e.conf3_weight.reshape(-1, k_depth) + e.conf3_bias
    conf = sigmoid(hidden @ e.conf1_weight.reshape(k_depth, k_depth) + e.conf1_bias)
    z = att_out + cfg.beta * (attn @ conf)
    refined = sigmoid(z @ e.out_weight.reshape(k_depth, 1) + e.out_bias)
    return refined.reshape(h, w), attn, conf.reshape(h, w, k_depth)


def filter_forward(
    query: TokenEmbeddingSet,
    prototypes: np.ndarray,
    cost_values: np.ndarray,
    params: FilterParameters,
) -> AnomalyMap:
    """Full two-stage forward pass producing the anomaly map.

    Query tokens and retained prototypes are L2-normalized per cell before
    entering the filter.
    """
    values, _ = _forward(
        params,
        normalize_grid(query.patch_tokens.astype(np.float64)),
        normalize_grid(np.asarray(prototypes, dtype=np.float64)),
        cost_values,
    )
    return AnomalyMap(
        values=values,
        source_height=query.source_height,
        source_width=query.source_width,
    )


def filter_forward_detailed(
    params: FilterParameters,
    query_grid: np.ndarray,
    prototype_grid: np.ndarray,
    cost_values: np.ndarray,
):
    """Forward pass on raw grids; returns (map values, stage-1 probs, active set, stage-2 weights)."""
    values, cache = _forward(params, query_grid, prototype_grid, cost_values)
    return values, cache["p1"], np.asarray(cache["active"]), cache["p2"]
