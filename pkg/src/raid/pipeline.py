"""Pipeline orchestration: the operations behind the service endpoints.

Each function takes filesystem paths plus a PipelineConfig, performs one
stage (database build, detection, training, evaluation, benchmark), writes
its artifacts atomically (temp file + rename), and returns a summary dict
that the service serializes as-is.  Every operation is reproducible from
(inputs, seed).
"""

from __future__ import annotations

import csv
import io
import math
import os
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, interchange, retrieval, synthetic, training
from .database import HierarchicalDatabase, build_database
from .errors import ConfigMismatchError, RaidError
from .moe_filter import FilterParameters, filter_forward
from .types import GroundTruthMask, TokenEmbeddingSet


@dataclass
class PipelineConfig:
    """Tunable knobs with library defaults; command-line flags override."""

    num_classes: int | None = None
    num_semantic_prototypes: int = 50
    k_prime: int = 5
    k: int = 150
    stage1_experts: int = 3
    stage2_experts: int = 3
    active_experts: int = 2
    lambda_bal: float = 0.005
    focal_gamma: float = 2.0
    focal_alpha: float = 0.75
    learning_rate: float = 1e-4
    final_learning_rate: float | None = None
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    mode: str = "hier"

    def validate(self) -> None:
        if self.k < 1 or self.k_prime < 1:
            raise ValueError("k and k_prime must be at least 1")
        if self.active_experts > self.stage1_experts:
            raise ValueError("active_experts cannot exceed stage1_experts")
        if self.mode not in ("hier", "flat"):
            raise ValueError("mode must be 'hier' or 'flat'")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def load_embedding_dir(directory: str | Path) -> list[TokenEmbeddingSet]:
    """Every RAIDEMB1 file in a directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix == ".emb")
    if not files:
        raise ValueError(f"no templates: {directory} holds no .emb files")
    sets = []
    failures = []
    for path in files:
        try:
            with open(path, "rb") as fh:
                sets.append(interchange.load_embedding_set(fh))
        except RaidError as exc:
            failures.append(f"{path.name}: {exc}")
    if failures:
        raise ValueError("unreadable embedding files: " + "; ".join(failures))
    dims = {s.dim for s in sets}
    if len(dims) > 1:
        offender = next(s for s, p in zip(sets, files) if s.dim != sets[0].dim)
        raise ValueError(
            f"mixed dimensions across files: {offender.image_id} has D={offender.dim}, "
            f"expected D={sets[0].dim}"
        )
    return sets


def _load_database(path: str | Path) -> HierarchicalDatabase:
    with open(path, "rb") as fh:
        return interchange.load_database(fh)


def _load_filter(path: str | Path) -> FilterParameters:
    with open(path, "rb") as fh:
        return interchange.load_filter(fh)


def build_database_cmd(templates_dir: str, db_path: str, config: PipelineConfig) -> dict:
    """Ingest templates, build the hierarchical database, save it."""
    config.validate()
    templates = load_embedding_dir(templates_dir)
    num_classes = config.num_classes
    if num_classes is None:
        labels = {t.class_label for t in templates}
        if None in labels:
            raise ValueError(
                "num_classes not set and templates carry no class labels; pass --classes"
            )
        num_classes = len(labels)
    db = build_database(templates, num_classes, config.num_semantic_prototypes, config.seed)
    buf = io.BytesIO()
    interchange.save_database(db, buf)
    path = Path(db_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, buf.getvalue())
    return {
        "path": str(path),
        "dimension": db.dim,
        "num_classes": db.num_classes,
        "prototypes_per_class": db.prototypes_per_class(),
        "total_tokens": db.total_tokens(),
        "num_templates": len(templates),
    }


def _retrieve(query, db, config: PipelineConfig):
    if config.mode == "flat":
        return retrieval.flat_retrieve(query, db, config.k)
    return retrieval.hierarchical_retrieve(query, db, config.k_prime, config.k)


def detect_cmd(
    queries_dir: str, db_path: str, filter_path: str, out_dir: str, config: PipelineConfig
) -> dict:
    """Retrieve, build cost volumes, filter, and score every query image.

    Writes <image_id>.map (RAIDMAP1), <image_id>.pgm (visualization), and
    scores.csv into out_dir.
    """
    config.validate()
    if not Path(filter_path).exists():
        raise ValueError(f"missing filter file: {filter_path} (train one with the train command)")
    if not Path(db_path).exists():
        raise ValueError(f"missing database file: {db_path} (build one with the build-db command)")
    queries = load_embedding_dir(queries_dir)
    db = _load_database(db_path)
    params = _load_filter(filter_path)
    if params.config.dim != db.dim:
        raise ConfigMismatchError(
            f"incompatible configuration: filter dim {params.config.dim} vs database {db.dim}"
        )
    if params.config.volume_depth != config.k:
        raise ConfigMismatchError(
            f"incompatible configuration: filter expects K={params.config.volume_depth}, "
            f"pipeline configured K={config.k}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for query in queries:
        rr = _retrieve(query, db, config)
        cost = retrieval.build_cost_volume(rr, query)
        anomaly_map = filter_forward(query, rr.prototypes, cost.values, params)
        score = evaluation.image_score(anomaly_map)

        buf = io.BytesIO()
        interchange.save_map(anomaly_map, buf)
        _atomic_write(out / f"{query.image_id}.map", buf.getvalue())
        buf = io.BytesIO()
        interchange.save_map_pgm(anomaly_map, buf)
        _atomic_write(out / f"{query.image_id}.pgm", buf.getvalue())
        rows.append([query.image_id, f"{score:.9f}", query.class_label or ""])

    _write_csv(out / "scores.csv", ["image_id", "score", "label"], rows)
    return {
        "out_dir": str(out),
        "num_queries": len(queries),
        "scores_csv": str(out / "scores.csv"),
        "scores": [
            {"image_id": r[0], "score": float(r[1]), "label": r[2] or None} for r in rows
        ],
    }


def train_cmd(
    templates_dir: str, db_path: str, filter_path: str, out_dir: str, config: PipelineConfig
) -> dict:
    """Train the filter on synthetic anomalies; save parameters and loss.csv."""
    config.validate()
    templates = load_embedding_dir(templates_dir)
    db = _load_database(db_path)
    train_config = training.TrainConfig(
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        final_learning_rate=config.final_learning_rate,
        batch_size=config.batch_size,
        seed=config.seed,
        k_prime=config.k_prime,
        k=config.k,
        lambda_bal=config.lambda_bal,
        focal_gamma=config.focal_gamma,
        focal_alpha=config.focal_alpha,
        stage1_experts=config.stage1_experts,
        stage2_experts=config.stage2_experts,
        active_experts=config.active_experts,
    )
    params, history = training.train_filter(templates, db, train_config)

    path = Path(filter_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    interchange.save_filter(params, buf)
    _atomic_write(path, buf.getvalue())

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "loss.csv",
        ["epoch", "focal", "balance", "total"],
        [
            [e, f"{h.focal:.9f}", f"{h.balance:.9f}", f"{h.total:.9f}"]
            for e, h in enumerate(history)
        ],
    )
    return {
        "filter_path": str(path),
        "loss_csv": str(out / "loss.csv"),
        "epochs": len(history),
        "volume_depth": params.config.volume_depth,
        "first_loss": history[0].total if history else None,
        "final_loss": history[-1].total if history else None,
    }


def eval_cmd(out_dir: str, masks_dir: str | None) -> dict:
    """Evaluate saved anomaly maps against PGM ground-truth masks.

    Maps come from a detect run's output directory; a query without a mask
    file counts as normal.  Writes metrics.csv alongside the maps.
    """
    out = Path(out_dir)
    map_files = sorted(out.glob("*.map"))
    if not map_files:
        raise ValueError(f"no anomaly maps in {out}")
    maps, masks = [], []
    for path in map_files:
        with open(path, "rb") as fh:
            anomaly_map = interchange.load_map(fh)
        maps.append(anomaly_map)
        mask = None
        if masks_dir is not None:
            mask_path = Path(masks_dir) / f"{path.stem}.pgm"
            if mask_path.exists():
                with open(mask_path, "rb") as fh:
                    mask = interchange.load_mask_pgm(fh, image_id=path.stem).mask
        if mask is None:
            mask = np.zeros((anomaly_map.source_height, anomaly_map.source_width), dtype=np.uint8)
        masks.append(mask)
    report = evaluation.evaluate_run(maps, masks)
    _write_csv(
        out / "metrics.csv",
        ["metric", "value"],
        [[name, f"{value:.9f}"] for name, value in report.rows()],
    )
    return {
        "metrics_csv": str(out / "metrics.csv"),
        "num_images": len(maps),
        **{name: value for name, value in report.rows()},
    }


@dataclass
class BenchRow:
    mode: str
    tokens: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    comparisons: int
    agreement: float
    min_cost_delta: float


def bench_cmd(
    sizes: list[int],
    out_dir: str,
    config: PipelineConfig,
    queries_per_size: int = 4,
    grid: int = 16,
    num_classes: int = 3,
    modes_per_class: int = 8,
) -> dict:
    """Flat vs hierarchical retrieval on seeded synthetic databases.

    For each target token count: build a clustered database, retrieve a fixed
    query set in both modes, and report latency, comparison counters, top-K
    set agreement against the flat oracle, and the mean absolute difference
    of the per-patch best-match cost.  Writes bench.csv.

    The synthetic databases are indexed with one semantic prototype per
    generated token cluster, so the index structure matches the data and the
    agreement column isolates retrieval behavior rather than clustering
    granularity.
    """
    config.validate()
    if not sizes:
        raise ValueError("no sizes given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[BenchRow] = []
    tokens_per_template = grid * grid

    for size in sizes:
        per_class = max(1, math.ceil(size / (tokens_per_template * num_classes)))
        spec = synthetic.SyntheticSpec(
            num_classes=num_classes,
            templates_per_class=per_class,
            grid_height=grid,
            grid_width=grid,
            dim=16,
            modes_per_class=modes_per_class,
        )
        templates = synthetic.make_templates(spec, seed=config.seed)
        db = build_database(templates, num_classes, modes_per_class, config.seed)
        total_tokens = db.total_tokens()
        k = min(config.k, min(db.class_token_count(c) for c in range(db.num_classes)))
        queries = synthetic.make_queries(spec, seed=config.seed, per_class=1)[:queries_per_size]

        flat_results, hier_results = [], []
        flat_times, hier_times = [], []
        for query in queries:
            fr = retrieval.flat_retrieve(query, db, k)
            flat_results.append(fr)
            flat_times.append(fr.elapsed_seconds * 1e3)
            hr = retrieval.hierarchical_retrieve(query, db, config.k_prime, k)
            hier_results.append(hr)
            hier_times.append(hr.elapsed_seconds * 1e3)

        agree_patches = 0
        total_patches = 0
        cost_delta = 0.0
        for fr, hr in zip(flat_results, hier_results):
            n = fr.token_indices.shape[0] * fr.token_indices.shape[1]
            flat_sets = fr.token_indices.reshape(n, k)
            hier_sets = hr.token_indices.reshape(n, k)
            for row in range(n):
                if np.array_equal(np.sort(flat_sets[row]), np.sort(hier_sets[row])):
                    agree_patches += 1
            total_patches += n
            cost_delta += float(
                np.abs(
                    (1.0 - fr.similarities.max(axis=2)) - (1.0 - hr.similarities.max(axis=2))
                ).mean()
            )
        agreement = agree_patches / total_patches
        cost_delta /= len(queries)

        rows.append(
            BenchRow(
                mode="flat",
                tokens=total_tokens,
                mean_ms=statistics.mean(flat_times),
                median_ms=statistics.median(flat_times),
                p95_ms=_p95(flat_times),
                comparisons=flat_results[0].comparisons,
                agreement=1.0,
                min_cost_delta=0.0,
            )
        )
        rows.append(
            BenchRow(
                mode="hier",
                tokens=total_tokens,
                mean_ms=statistics.mean(hier_times),
                median_ms=statistics.median(hier_times),
                p95_ms=_p95(hier_times),
                comparisons=hier_results[0].comparisons,
                agreement=agreement,
                min_cost_delta=cost_delta,
            )
        )

    _write_csv(
        out / "bench.csv",
        ["mode", "tokens", "mean_ms", "median_ms", "p95_ms", "comparisons", "agreement", "min_cost_delta"],
        [
            [
                r.mode,
                r.tokens,
                f"{r.mean_ms:.3f}",
                f"{r.median_ms:.3f}",
                f"{r.p95_ms:.3f}",
                r.comparisons,
                f"{r.agreement:.6f}",
                f"{r.min_cost_delta:.9f}",
            ]
            for r in rows
        ],
    )
    return {
        "bench_csv": str(out / "bench.csv"),
        "rows": [r.__dict__ for r in rows],
    }


def _p95(values: list[float]) -> float:
    ordered = sorted(values)
    idx = min(len(ordered) - 1, math.ceil(0.95 * len(ordered)) - 1)
    return ordered[idx]


def export_mask_pgm(mask: GroundTruthMask, path: str | Path) -> None:
    """Convenience: write a ground-truth mask as PGM (used by tests and tools)."""
    buf = io.BytesIO()
    interchange.save_mask_pgm(mask, buf)
    _atomic_write(Path(path), buf.getvalue())


def export_embedding(embedding: TokenEmbeddingSet, path: str | Path) -> None:
    """Convenience: write an embedding set to a .emb file."""
    buf = io.BytesIO()
    interchange.save_embedding_set(embedding, buf)
    _atomic_write(Path(path), buf.getvalue())
