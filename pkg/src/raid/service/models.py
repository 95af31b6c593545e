"""Pydantic request/response models for the detection service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ConfigOverrides(BaseModel):
    """Optional hyperparameter overrides; unset fields keep library defaults."""

    num_classes: int | None = None
    num_semantic_prototypes: int | None = None
    k_prime: int | None = Field(default=None, ge=1)
    k: int | None = Field(default=None, ge=1)
    stage1_experts: int | None = None
    stage2_experts: int | None = None
    active_experts: int | None = None
    lambda_bal: float | None = None
    focal_gamma: float | None = None
    focal_alpha: float | None = None
    learning_rate: float | None = None
    final_learning_rate: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    seed: int | None = None
    mode: str | None = None


class BuildDatabaseRequest(BaseModel):
    templates_dir: str
    db_path: str
    config: ConfigOverrides = ConfigOverrides()


class BuildDatabaseResponse(BaseModel):
    path: str
    dimension: int
    num_classes: int
    prototypes_per_class: list[int]
    total_tokens: int
    num_templates: int


class DetectRequest(BaseModel):
    queries_dir: str
    db_path: str
    filter_path: str
    out_dir: str
    config: ConfigOverrides = ConfigOverrides()


class ScoreRow(BaseModel):
    image_id: str
    score: float
    label: str | None = None


class DetectResponse(BaseModel):
    out_dir: str
    num_queries: int
    scores_csv: str
    scores: list[ScoreRow]


class TrainRequest(BaseModel):
    templates_dir: str
    db_path: str
    filter_path: str
    out_dir: str
    config: ConfigOverrides = ConfigOverrides()


class TrainResponse(BaseModel):
    filter_path: str
    loss_csv: str
    epochs: int
    volume_depth: int
    first_loss: float | None
    final_loss: float | None


class EvalRequest(BaseModel):
    out_dir: str
    masks_dir: str | None = None


class EvalResponse(BaseModel):
    metrics_csv: str
    num_images: int
    image_auroc: float
    image_ap: float
    image_f1max: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    aupro: float


class BenchRequest(BaseModel):
    sizes: list[int]
    out_dir: str
    config: ConfigOverrides = ConfigOverrides()
    queries_per_size: int = 4


class BenchRowModel(BaseModel):
    mode: str
    tokens: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    comparisons: int
    agreement: float
    min_cost_delta: float


class BenchResponse(BaseModel):
    bench_csv: str
    rows: list[BenchRowModel]


class HealthResponse(BaseModel):
    status: str
    version: str
