"""FastAPI application wrapping the pipeline operations.

The service is stateless: every request names its input and output paths on
the shared filesystem, so results are reproducible from (request, seed) and
concurrent clients cannot corrupt each other's runs.
"""

from __future__ import annotations

from dataclasses import fields

from fastapi import FastAPI, HTTPException

from .. import __version__, pipeline
from ..errors import RaidError
from .models import (
    BenchRequest,
    BenchResponse,
    BuildDatabaseRequest,
    BuildDatabaseResponse,
    ConfigOverrides,
    DetectRequest,
    DetectResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    TrainRequest,
    TrainResponse,
)


def resolve_config(overrides: ConfigOverrides) -> pipeline.PipelineConfig:
    """Apply non-null overrides onto the library defaults."""
    config = pipeline.PipelineConfig()
    valid = {f.name for f in fields(pipeline.PipelineConfig)}
    for name, value in overrides.model_dump().items():
        if value is not None and name in valid:
            setattr(config, name, value)
    return config


def create_app() -> FastAPI:
    app = FastAPI(title="raid", version=__version__)

    def run(fn, *args):
        try:
            return fn(*args)
        except (RaidError, ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/v1/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/v1/database/build", response_model=BuildDatabaseResponse)
    def build_database(request: BuildDatabaseRequest):
        config = resolve_config(request.config)
        return run(pipeline.build_database_cmd, request.templates_dir, request.db_path, config)

    @app.post("/v1/detect", response_model=DetectResponse)
    def detect(request: DetectRequest):
        config = resolve_config(request.config)
        return run(
            pipeline.detect_cmd,
            request.queries_dir,
            request.db_path,
            request.filter_path,
            request.out_dir,
            config,
        )

    @app.post("/v1/train", response_model=TrainResponse)
    def train(request: TrainRequest):
        config = resolve_config(request.config)
        return run(
            pipeline.train_cmd,
            request.templates_dir,
            request.db_path,
            request.filter_path,
            request.out_dir,
            config,
        )

    @app.post("/v1/evaluate", response_model=EvalResponse)
    def evaluate(request: EvalRequest):
        return run(pipeline.eval_cmd, request.out_dir, request.masks_dir)

    @app.post("/v1/bench", response_model=BenchResponse)
    def bench(request: BenchRequest):
        config = resolve_config(request.config)
        try:
            return pipeline.bench_cmd(
                request.sizes, request.out_dir, config, request.queries_per_size
            )
        except (RaidError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    return app


app = create_app()
