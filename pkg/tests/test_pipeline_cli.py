import csv
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from raid import cli, pipeline, synthetic, training
from raid.pipeline import PipelineConfig

SPEC = synthetic.SyntheticSpec(
    num_classes=2, templates_per_class=4, grid_height=4, grid_width=4,
    dim=6, modes_per_class=2,
)


def write_embeddings(directory: Path, sets):
    directory.mkdir(parents=True, exist_ok=True)
    for s in sets:
        pipeline.export_embedding(s, directory / f"{s.image_id}.emb")


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Templates on disk, a built database, and a quickly trained filter."""
    root = tmp_path_factory.mktemp("world")
    templates = synthetic.make_templates(SPEC, seed=1)
    write_embeddings(root / "templates", templates)

    config = PipelineConfig(
        num_classes=2, num_semantic_prototypes=2, k_prime=2, k=8,
        stage1_experts=2, stage2_experts=2, active_experts=1,
        epochs=60, learning_rate=5e-3, final_learning_rate=5e-4, batch_size=2, seed=3,
    )
    build = pipeline.build_database_cmd(str(root / "templates"), str(root / "db.raid"), config)
    train = pipeline.train_cmd(
        str(root / "templates"), str(root / "db.raid"), str(root / "filter.raid"),
        str(root / "train_out"), config,
    )
    return dict(root=root, templates=templates, config=config, build=build, train=train)


class TestBuildDatabaseCmd:
    def test_summary(self, world):
        build = world["build"]
        assert build["num_classes"] == 2
        assert build["dimension"] == 6
        assert build["total_tokens"] == 8 * 16
        assert Path(build["path"]).exists()

    def test_empty_dir_error(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        with pytest.raises(ValueError, match="no templates"):
            pipeline.build_database_cmd(str(empty), str(tmp_path / "db"), PipelineConfig(num_classes=1))

    def test_mixed_dimensions_names_offender(self, tmp_path):
        templates = synthetic.make_templates(SPEC, seed=4)
        other_spec = synthetic.SyntheticSpec(
            num_classes=1, templates_per_class=1, grid_height=4, grid_width=4,
            dim=9, modes_per_class=1,
        )
        odd = synthetic.make_templates(other_spec, seed=5, prefix="zz_odd")
        write_embeddings(tmp_path / "mixed", templates + odd)
        with pytest.raises(ValueError, match="zz_odd"):
            pipeline.build_database_cmd(
                str(tmp_path / "mixed"), str(tmp_path / "db"), PipelineConfig(num_classes=2)
            )

    def test_classes_default_from_labels(self, tmp_path, world):
        write_embeddings(tmp_path / "t", world["templates"])
        result = pipeline.build_database_cmd(
            str(tmp_path / "t"), str(tmp_path / "db"), PipelineConfig(num_semantic_prototypes=2)
        )
        assert result["num_classes"] == 2


class TestTrainCmd:
    def test_outputs(self, world):
        train = world["train"]
        assert Path(train["filter_path"]).exists()
        loss_csv = Path(train["loss_csv"])
        assert loss_csv.exists()
        rows = list(csv.DictReader(loss_csv.open()))
        assert len(rows) == 60
        assert {"epoch", "focal", "balance", "total"} <= set(rows[0])
        assert train["final_loss"] < train["first_loss"]


class TestDetectCmd:
    def test_detect_and_score_ordering(self, world, tmp_path):
        root = world["root"]
        clean = synthetic.make_queries(SPEC, seed=1, per_class=1, prefix="clean")
        corrupted = []
        for q in clean:
            foreign = [t for t in world["templates"] if t.class_label != q.class_label]
            sample = training.inject_anomaly(
                q, foreign, seed=7, config=training.AnomalyConfig(alpha_range=(1.0, 1.0))
            )
            s = sample.embedding_set
            s.image_id = q.image_id.replace("clean", "broken")
            corrupted.append(s)
        write_embeddings(tmp_path / "queries", clean + corrupted)

        result = pipeline.detect_cmd(
            str(tmp_path / "queries"), str(root / "db.raid"), str(root / "filter.raid"),
            str(tmp_path / "out"), world["config"],
        )
        scores = {r["image_id"]: r["score"] for r in result["scores"]}
        for c, b in zip(sorted(k for k in scores if "clean" in k), sorted(k for k in scores if "broken" in k)):
            assert scores[b] > scores[c], f"{b} should outscore {c}"
        out = Path(result["out_dir"])
        for image_id in scores:
            assert (out / f"{image_id}.map").exists()
            assert (out / f"{image_id}.pgm").exists()
        assert (out / "scores.csv").exists()

    def test_rerun_is_byte_identical(self, world, tmp_path):
        root = world["root"]
        queries = synthetic.make_queries(SPEC, seed=8, per_class=1)
        write_embeddings(tmp_path / "q", queries)
        a = pipeline.detect_cmd(
            str(tmp_path / "q"), str(root / "db.raid"), str(root / "filter.raid"),
            str(tmp_path / "a"), world["config"],
        )
        b = pipeline.detect_cmd(
            str(tmp_path / "q"), str(root / "db.raid"), str(root / "filter.raid"),
            str(tmp_path / "b"), world["config"],
        )
        for query in queries:
            bytes_a = (Path(a["out_dir"]) / f"{query.image_id}.map").read_bytes()
            bytes_b = (Path(b["out_dir"]) / f"{query.image_id}.map").read_bytes()
            assert bytes_a == bytes_b

    def test_missing_filter_is_actionable(self, world, tmp_path):
        root = world["root"]
        with pytest.raises(ValueError, match="train"):
            pipeline.detect_cmd(
                str(root / "templates"), str(root / "db.raid"),
                str(tmp_path / "missing.flt"), str(tmp_path / "out"), world["config"],
            )

    def test_k_mismatch_refused(self, world, tmp_path):
        from raid.errors import ConfigMismatchError

        root = world["root"]
        bad = PipelineConfig(**{**world["config"].__dict__, "k": 5})
        with pytest.raises(ConfigMismatchError, match="incompatible"):
            pipeline.detect_cmd(
                str(root / "templates"), str(root / "db.raid"), str(root / "filter.raid"),
                str(tmp_path / "out"), bad,
            )

    def test_collapse_database_flat_equals_hier_bitwise(self, tmp_path):
        spec = synthetic.SyntheticSpec(
            num_classes=1, templates_per_class=4, grid_height=4, grid_width=4,
            dim=6, modes_per_class=1,
        )
        templates = synthetic.make_templates(spec, seed=9)
        write_embeddings(tmp_path / "templates", templates)
        config = PipelineConfig(
            num_classes=1, num_semantic_prototypes=1, k_prime=1, k=6,
            stage1_experts=2, stage2_experts=2, active_experts=1,
            epochs=2, batch_size=4, seed=10,
        )
        pipeline.build_database_cmd(str(tmp_path / "templates"), str(tmp_path / "db"), config)
        pipeline.train_cmd(
            str(tmp_path / "templates"), str(tmp_path / "db"), str(tmp_path / "flt"),
            str(tmp_path / "train_out"), config,
        )
        queries = synthetic.make_queries(spec, seed=9, per_class=2)
        write_embeddings(tmp_path / "queries", queries)
        flat_cfg = PipelineConfig(**{**config.__dict__, "mode": "flat"})
        pipeline.detect_cmd(
            str(tmp_path / "queries"), str(tmp_path / "db"), str(tmp_path / "flt"),
            str(tmp_path / "hier_out"), config,
        )
        pipeline.detect_cmd(
            str(tmp_path / "queries"), str(tmp_path / "db"), str(tmp_path / "flt"),
            str(tmp_path / "flat_out"), flat_cfg,
        )
        for query in queries:
            hier_bytes = (tmp_path / "hier_out" / f"{query.image_id}.map").read_bytes()
            flat_bytes = (tmp_path / "flat_out" / f"{query.image_id}.map").read_bytes()
            assert hier_bytes == flat_bytes


class TestEvalCmd:
    def test_metrics_csv(self, world, tmp_path):
        root = world["root"]
        clean = synthetic.make_queries(SPEC, seed=11, per_class=1, prefix="n")
        anomalous = []
        masks_dir = tmp_path / "masks"
        masks_dir.mkdir()
        from raid.types import GroundTruthMask

        for q in synthetic.make_queries(SPEC, seed=12, per_class=1, prefix="a"):
            foreign = [t for t in world["templates"] if t.class_label != q.class_label]
            sample = training.inject_anomaly(
                q, foreign, seed=13, config=training.AnomalyConfig(alpha_range=(1.0, 1.0))
            )
            s = sample.embedding_set
            s.image_id = q.image_id
            anomalous.append(s)
            scale_y = q.source_height // q.grid_height
            scale_x = q.source_width // q.grid_width
            big = np.kron(sample.mask, np.ones((scale_y, scale_x), dtype=np.uint8))
            pipeline.export_mask_pgm(
                GroundTruthMask(image_id=q.image_id, mask=big), masks_dir / f"{q.image_id}.pgm"
            )
        write_embeddings(tmp_path / "queries", clean + anomalous)
        detect = pipeline.detect_cmd(
            str(tmp_path / "queries"), str(root / "db.raid"), str(root / "filter.raid"),
            str(tmp_path / "out"), world["config"],
        )
        result = pipeline.eval_cmd(detect["out_dir"], str(masks_dir))
        assert Path(result["metrics_csv"]).exists()
        for key in ("image_auroc", "pixel_auroc", "aupro"):
            assert 0.0 <= result[key] <= 1.0
        rows = list(csv.reader(Path(result["metrics_csv"]).open()))
        assert rows[0] == ["metric", "value"]
        assert len(rows) == 8

    def test_no_maps_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValueError, match="no anomaly maps"):
            pipeline.eval_cmd(str(empty), None)


class TestPipelineConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(k=0).validate()
        with pytest.raises(ValueError):
            PipelineConfig(active_experts=4, stage1_experts=3).validate()
        with pytest.raises(ValueError):
            PipelineConfig(mode="turbo").validate()
        PipelineConfig().validate()


class TestBenchCmd:
    def test_bench_counters_and_csv(self, tmp_path):
        config = PipelineConfig(num_semantic_prototypes=6, k_prime=2, k=20, seed=14)
        result = pipeline.bench_cmd(
            [1500, 3000], str(tmp_path), config, queries_per_size=2, grid=8,
            num_classes=2, modes_per_class=2,
        )
        rows = result["rows"]
        assert len(rows) == 4
        by_size = {}
        for row in rows:
            by_size.setdefault(row["tokens"], {})[row["mode"]] = row
        for size, modes in by_size.items():
            assert modes["hier"]["comparisons"] < modes["flat"]["comparisons"]
            assert 0.0 <= modes["hier"]["agreement"] <= 1.0
        csv_rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
        assert {"mode", "tokens", "mean_ms", "p95_ms", "comparisons", "agreement"} <= set(csv_rows[0])


class TestCli:
    def test_full_cli_flow(self, tmp_path):
        runner = CliRunner()
        templates = synthetic.make_templates(SPEC, seed=15)
        write_embeddings(tmp_path / "templates", templates)
        queries = synthetic.make_queries(SPEC, seed=15, per_class=1)
        write_embeddings(tmp_path / "queries", queries)

        result = runner.invoke(cli.main, [
            "build-db", "--templates", str(tmp_path / "templates"),
            "--db", str(tmp_path / "db.raid"), "--classes", "2",
            "--semantic-protos", "2", "--seed", "16",
        ])
        assert result.exit_code == 0, result.output
        assert "C=2" in result.output

        result = runner.invoke(cli.main, [
            "train", "--templates", str(tmp_path / "templates"),
            "--db", str(tmp_path / "db.raid"), "--filter", str(tmp_path / "flt.raid"),
            "--out", str(tmp_path / "train_out"), "--epochs", "2", "--k", "8",
            "--k-prime", "2", "--seed", "16",
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "train_out" / "loss.csv").exists()

        result = runner.invoke(cli.main, [
            "detect", "--queries", str(tmp_path / "queries"),
            "--db", str(tmp_path / "db.raid"), "--filter", str(tmp_path / "flt.raid"),
            "--out", str(tmp_path / "detect_out"), "--k", "8", "--k-prime", "2",
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "detect_out" / "scores.csv").exists()

        result = runner.invoke(cli.main, [
            "eval", "--out", str(tmp_path / "detect_out"),
        ])
        # all-normal masks -> single class -> metric undefined -> clean error
        assert result.exit_code != 0
        assert "both classes" in result.output

        result = runner.invoke(cli.main, [
            "bench", "--sizes", "600,1200", "--out", str(tmp_path / "bench_out"),
            "--k", "10", "--k-prime", "2", "--semantic-protos", "4",
            "--queries-per-size", "1", "--seed", "17",
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "bench_out" / "bench.csv").exists()

    def test_error_exit_code_nonzero(self, tmp_path):
        runner = CliRunner()
        (tmp_path / "empty").mkdir()
        result = runner.invoke(cli.main, [
            "build-db", "--templates", str(tmp_path / "empty"),
            "--db", str(tmp_path / "db"), "--classes", "1",
        ])
        assert result.exit_code != 0
        assert "no templates" in result.output

    def test_config_file_precedence(self, tmp_path):
        config_path = tmp_path / "run.cfg"
        config_path.write_text("k=4\nseed=99\n# comment\nlambda-bal=0.01\n")
        file_config = cli._parse_config_file(str(config_path))
        merged = cli._build_overrides(file_config, k=6, seed=None)
        assert merged["k"] == 6          # explicit flag wins
        assert merged["seed"] == 99      # file fills the gap
        assert merged["lambda_bal"] == 0.01

    def test_config_file_unknown_key(self, tmp_path):
        config_path = tmp_path / "bad.cfg"
        config_path.write_text("bogus=1\n")
        with pytest.raises(Exception, match="unknown key"):
            cli._parse_config_file(str(config_path))


def service_request(method: str, path: str, **kwargs):
    import asyncio

    import httpx

    from raid.service.app import create_app

    async def _run():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, base_url="http://test") as client:
            return await client.request(method, path, **kwargs)

    return asyncio.run(_run())


class TestService:
    def test_health(self):
        health = service_request("GET", "/v1/health")
        assert health.status_code == 200
        assert health.json()["status"] == "ok"

    def test_error_detail(self, tmp_path):
        missing = service_request("POST", "/v1/database/build", json={
            "templates_dir": str(tmp_path), "db_path": str(tmp_path / "db"),
            "config": {"num_classes": 1},
        })
        assert missing.status_code == 400
        assert "no templates" in missing.json()["detail"]

    def test_validation_error_is_422(self):
        bad = service_request("POST", "/v1/detect", json={"queries_dir": 1})
        assert bad.status_code == 422
