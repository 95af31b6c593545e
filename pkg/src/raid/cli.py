"""Command-line client for the detection service.

Commands: build-db, detect, train, eval, bench, serve.  By default each
command mounts the service in-process (no socket); --server points it at a
running instance instead.  Flag precedence: command line > config file
(flat key=value lines) > library defaults.
"""

from __future__ import annotations

import asyncio
from pathlib import Path

import click
import httpx

from . import __version__
from .service.app import create_app

_CONFIG_KEYS = {
    "classes": "num_classes",
    "semantic-protos": "num_semantic_prototypes",
    "k-prime": "k_prime",
    "k": "k",
    "experts": "stage1_experts",
    "denoise-experts": "stage2_experts",
    "top-k": "active_experts",
    "lambda-bal": "lambda_bal",
    "gamma": "focal_gamma",
    "alpha": "focal_alpha",
    "lr": "learning_rate",
    "lr-final": "final_learning_rate",
    "epochs": "epochs",
    "batch": "batch_size",
    "seed": "seed",
    "mode": "mode",
}

_INT_FIELDS = {
    "num_classes",
    "num_semantic_prototypes",
    "k_prime",
    "k",
    "stage1_experts",
    "stage2_experts",
    "active_experts",
    "epochs",
    "batch_size",
    "seed",
}
_FLOAT_FIELDS = {"lambda_bal", "focal_gamma", "focal_alpha", "learning_rate", "final_learning_rate"}


def _request(server: str | None, path: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    async def _in_process() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://raid.local", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(_in_process())


def _parse_config_file(path: str | None) -> dict:
    """Flat key=value file; keys use the command-line flag names."""
    if path is None:
        return {}
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise click.ClickException(f"{path}:{line_no}: expected key=value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise click.ClickException(f"{path}:{line_no}: unknown key '{key}'")
        values[_CONFIG_KEYS[key]] = raw.strip()
    return values


def _build_overrides(file_config: dict, **flags) -> dict:
    merged: dict = {}
    for name, raw in file_config.items():
        merged[name] = raw
    for name, value in flags.items():
        if value is not None:
            merged[name] = value
    typed = {}
    for name, value in merged.items():
        if isinstance(value, str) and name in _INT_FIELDS:
            typed[name] = int(value)
        elif isinstance(value, str) and name in _FLOAT_FIELDS:
            typed[name] = float(value)
        else:
            typed[name] = value
    return typed


def _post(server: str | None, path: str, payload: dict) -> dict:
    response = _request(server, path, payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise click.ClickException(str(detail))
    return response.json()


def _shared_options(fn):
    fn = click.option("--server", default=None, help="URL of a running service; default runs in-process")(fn)
    fn = click.option("--config", "config_file", default=None, type=click.Path(exists=True), help="flat key=value config file")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="raid")
def main():
    """Retrieval-augmented anomaly detection pipeline."""


@main.command("build-db")
@click.option("--templates", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--db", "db_path", required=True, type=click.Path())
@click.option("--classes", "num_classes", type=int, default=None)
@click.option("--semantic-protos", "num_semantic_prototypes", type=int, default=None)
@_shared_options
def build_db(templates, db_path, num_classes, num_semantic_prototypes, seed, config_file, server):
    """Build the hierarchical vector database from template embeddings."""
    overrides = _build_overrides(
        _parse_config_file(config_file),
        num_classes=num_classes,
        num_semantic_prototypes=num_semantic_prototypes,
        seed=seed,
    )
    result = _post(server, "/v1/database/build", {
        "templates_dir": templates,
        "db_path": db_path,
        "config": overrides,
    })
    click.echo(
        f"database {result['path']}: D={result['dimension']}, C={result['num_classes']}, "
        f"prototypes per class {result['prototypes_per_class']}, "
        f"{result['total_tokens']} instance tokens from {result['num_templates']} templates"
    )


@main.command()
@click.option("--queries", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--db", "db_path", required=True, type=click.Path(exists=True))
@click.option("--filter", "filter_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["flat", "hier"]), default=None)
@click.option("--k-prime", "k_prime", type=int, default=None)
@click.option("--k", type=int, default=None)
@_shared_options
def detect(queries, db_path, filter_path, out_dir, mode, k_prime, k, seed, config_file, server):
    """Score query embeddings against the database and save anomaly maps."""
    overrides = _build_overrides(
        _parse_config_file(config_file), mode=mode, k_prime=k_prime, k=k, seed=seed
    )
    result = _post(server, "/v1/detect", {
        "queries_dir": queries,
        "db_path": db_path,
        "filter_path": filter_path,
        "out_dir": out_dir,
        "config": overrides,
    })
    click.echo(f"scored {result['num_queries']} queries -> {result['scores_csv']}")


@main.command()
@click.option("--templates", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--db", "db_path", required=True, type=click.Path(exists=True))
@click.option("--filter", "filter_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--lr-final", "final_learning_rate", type=float, default=None,
              help="cosine-decay the learning rate down to this value")
@click.option("--lambda-bal", "lambda_bal", type=float, default=None)
@click.option("--k-prime", "k_prime", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--batch", "batch_size", type=int, default=None)
@_shared_options
def train(templates, db_path, filter_path, out_dir, epochs, learning_rate, final_learning_rate,
          lambda_bal, k_prime, k, batch_size, seed, config_file, server):
    """Train the guided filter on synthetic anomalies."""
    overrides = _build_overrides(
        _parse_config_file(config_file),
        epochs=epochs,
        learning_rate=learning_rate,
        final_learning_rate=final_learning_rate,
        lambda_bal=lambda_bal,
        k_prime=k_prime,
        k=k,
        batch_size=batch_size,
        seed=seed,
    )
    result = _post(server, "/v1/train", {
        "templates_dir": templates,
        "db_path": db_path,
        "filter_path": filter_path,
        "out_dir": out_dir,
        "config": overrides,
    })
    click.echo(
        f"trained {result['epochs']} epochs (K={result['volume_depth']}): "
        f"loss {result['first_loss']:.6f} -> {result['final_loss']:.6f}; "
        f"filter saved to {result['filter_path']}"
    )


@main.command("eval")
@click.option("--out", "out_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--masks", "masks_dir", default=None, type=click.Path(file_okay=False))
@click.option("--server", default=None)
def eval_cmd(out_dir, masks_dir, server):
    """Evaluate saved anomaly maps against ground-truth masks."""
    result = _post(server, "/v1/evaluate", {"out_dir": out_dir, "masks_dir": masks_dir})
    click.echo(f"metrics over {result['num_images']} images -> {result['metrics_csv']}")
    for name in ("image_auroc", "image_ap", "image_f1max", "pixel_auroc", "pixel_ap", "pixel_f1max", "aupro"):
        click.echo(f"  {name:>13}: {result[name]:.4f}")


@main.command()
@click.option("--sizes", required=True, help="comma-separated token counts, e.g. 10000,50000")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--k", type=int, default=None)
@click.option("--k-prime", "k_prime", type=int, default=None)
@click.option("--semantic-protos", "num_semantic_prototypes", type=int, default=None)
@click.option("--queries-per-size", type=int, default=4)
@_shared_options
def bench(sizes, out_dir, k, k_prime, num_semantic_prototypes, queries_per_size, seed, config_file, server):
    """Benchmark flat vs hierarchical retrieval on synthetic databases."""
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise click.ClickException(f"bad --sizes value: {sizes}") from exc
    overrides = _build_overrides(
        _parse_config_file(config_file),
        k=k,
        k_prime=k_prime,
        num_semantic_prototypes=num_semantic_prototypes,
        seed=seed,
    )
    result = _post(server, "/v1/bench", {
        "sizes": size_list,
        "out_dir": out_dir,
        "config": overrides,
        "queries_per_size": queries_per_size,
    })
    click.echo(f"benchmark -> {result['bench_csv']}")
    for row in result["rows"]:
        click.echo(
            f"  {row['mode']:>4} {row['tokens']:>8} tokens: mean {row['mean_ms']:8.2f} ms, "
            f"p95 {row['p95_ms']:8.2f} ms, {row['comparisons']:>12} comparisons, "
            f"agreement {row['agreement']:.3f}"
        )


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the detection service."""
    import uvicorn

    uvicorn.run("raid.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
