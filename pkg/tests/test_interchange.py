import io

import numpy as np
import pytest

from raid import interchange
from raid.database import HierarchicalDatabase
from raid.errors import ConfigMismatchError, InterchangeError
from raid.moe_filter import FilterConfig, FilterParameters
from raid.types import AnomalyMap, GroundTruthMask, TokenEmbeddingSet

from conftest import random_embedding


def roundtrip_embedding(embedding):
    buf = io.BytesIO()
    n = interchange.save_embedding_set(embedding, buf)
    assert n == len(buf.getvalue())
    buf.seek(0)
    return interchange.load_embedding_set(buf)


class TestEmbeddingFormat:
    def test_minimal_roundtrip(self):
        embedding = TokenEmbeddingSet(
            image_id="tiny",
            cls_token=np.array([1.0, 0.0], dtype=np.float32),
            patch_tokens=np.array([[[0.0, 1.0]]], dtype=np.float32),
            source_height=8,
            source_width=8,
        )
        loaded = roundtrip_embedding(embedding)
        assert loaded.image_id == "tiny"
        assert loaded.class_label is None
        np.testing.assert_array_equal(loaded.cls_token, embedding.cls_token)
        np.testing.assert_array_equal(loaded.patch_tokens, embedding.patch_tokens)
        assert (loaded.source_height, loaded.source_width) == (8, 8)

    def test_byte_count_matches_layout(self):
        embedding = TokenEmbeddingSet(
            image_id="id",
            cls_token=np.array([1.0, 0.0], dtype=np.float32),
            patch_tokens=np.array([[[0.0, 1.0]]], dtype=np.float32),
            source_height=8,
            source_width=8,
        )
        buf = io.BytesIO()
        n = interchange.save_embedding_set(embedding, buf)
        # magic + 5 u32 + (len + id) + flag + cls + patches
        assert n == 8 + 5 * 4 + (4 + 2) + 1 + 2 * 4 + 2 * 4

    def test_random_roundtrips_bitwise(self):
        rng = np.random.default_rng(0)
        for i in range(20):
            embedding = random_embedding(
                rng,
                h=int(rng.integers(1, 5)),
                w=int(rng.integers(1, 5)),
                d=int(rng.integers(1, 7)),
                image_id=f"img{i}",
                label="lbl" if i % 2 else None,
            )
            loaded = roundtrip_embedding(embedding)
            assert loaded.image_id == embedding.image_id
            assert loaded.class_label == embedding.class_label
            np.testing.assert_array_equal(loaded.cls_token, embedding.cls_token)
            np.testing.assert_array_equal(loaded.patch_tokens, embedding.patch_tokens)

    def test_save_is_deterministic(self):
        embedding = random_embedding(np.random.default_rng(1))
        a, b = io.BytesIO(), io.BytesIO()
        interchange.save_embedding_set(embedding, a)
        interchange.save_embedding_set(embedding, b)
        assert a.getvalue() == b.getvalue()

    def test_nan_refused_on_save(self):
        embedding = random_embedding(np.random.default_rng(2))
        embedding.patch_tokens[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            interchange.save_embedding_set(embedding, io.BytesIO())

    def test_wrong_magic(self):
        with pytest.raises(InterchangeError, match="not a RAIDEMB1"):
            interchange.load_embedding_set(io.BytesIO(b"RAIDDB01" + b"\x00" * 64))

    def test_truncated_payload(self):
        embedding = random_embedding(np.random.default_rng(3))
        buf = io.BytesIO()
        interchange.save_embedding_set(embedding, buf)
        with pytest.raises(InterchangeError, match="EOF"):
            interchange.load_embedding_set(io.BytesIO(buf.getvalue()[:-5]))

    def test_corrupt_nan_payload(self):
        embedding = random_embedding(np.random.default_rng(4), h=1, w=1, d=2)
        buf = io.BytesIO()
        interchange.save_embedding_set(embedding, buf)
        data = bytearray(buf.getvalue())
        data[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        with pytest.raises(InterchangeError, match="corrupt"):
            interchange.load_embedding_set(io.BytesIO(bytes(data)))


class TestDatabaseFormat:
    def test_roundtrip_bitwise(self, tiny_db):
        buf = io.BytesIO()
        interchange.save_database(tiny_db, buf)
        buf.seek(0)
        loaded = interchange.load_database(buf)
        assert loaded.dim == tiny_db.dim
        assert loaded.image_id_table == tiny_db.image_id_table
        np.testing.assert_array_equal(loaded.class_prototypes, tiny_db.class_prototypes)
        for a, b in zip(loaded.semantic_prototypes, tiny_db.semantic_prototypes):
            np.testing.assert_array_equal(a, b)
        for ca, cb in zip(loaded.buckets, tiny_db.buckets):
            for ba, bb in zip(ca, cb):
                np.testing.assert_array_equal(ba.tokens, bb.tokens)
                np.testing.assert_array_equal(ba.image_ids, bb.image_ids)
                np.testing.assert_array_equal(ba.ys, bb.ys)
                np.testing.assert_array_equal(ba.xs, bb.xs)

    def test_save_load_save_identical_bytes(self, tiny_db):
        first = io.BytesIO()
        interchange.save_database(tiny_db, first)
        first.seek(0)
        loaded = interchange.load_database(first)
        second = io.BytesIO()
        interchange.save_database(loaded, second)
        assert first.getvalue() == second.getvalue()

    def test_empty_database_roundtrips(self):
        db = HierarchicalDatabase(
            dim=4,
            class_prototypes=np.empty((0, 4), dtype=np.float32),
            semantic_prototypes=[],
            buckets=[],
            image_id_table=[],
        )
        buf = io.BytesIO()
        interchange.save_database(db, buf)
        buf.seek(0)
        loaded = interchange.load_database(buf)
        assert loaded.num_classes == 0
        assert loaded.total_tokens() == 0

    def test_wrong_magic(self):
        with pytest.raises(InterchangeError, match="not a RAIDDB01"):
            interchange.load_database(io.BytesIO(b"RAIDEMB1" + b"\x00" * 32))


class TestFilterFormat:
    def test_roundtrip_bitwise(self):
        cfg = FilterConfig(dim=3, volume_depth=4, stage1_experts=2, stage2_experts=2, active_experts=1)
        params = FilterParameters.initialize(cfg, seed=5)
        # Round to float32-representable values so the file roundtrip is exact.
        for _, tensor in params.param_items():
            tensor[...] = tensor.astype(np.float32).astype(np.float64)
        buf = io.BytesIO()
        interchange.save_filter(params, buf)
        buf.seek(0)
        loaded = interchange.load_filter(buf)
        assert loaded.config == cfg
        for (name_a, a), (name_b, b) in zip(params.param_items(), loaded.param_items()):
            assert name_a == name_b
            np.testing.assert_array_equal(a, b)

    def test_config_mismatch(self):
        cfg = FilterConfig(dim=3, volume_depth=150)
        params = FilterParameters.initialize(cfg, seed=6)
        buf = io.BytesIO()
        interchange.save_filter(params, buf)
        buf.seek(0)
        with pytest.raises(ConfigMismatchError, match="incompatible"):
            interchange.load_filter(buf, expected=FilterConfig(dim=3, volume_depth=100))

    def test_wrong_magic(self):
        with pytest.raises(InterchangeError, match="not a RAIDFLT1"):
            interchange.load_filter(io.BytesIO(b"RAIDMAP1" + b"\x00" * 32))

    def test_truncated(self):
        cfg = FilterConfig(dim=2, volume_depth=3)
        params = FilterParameters.initialize(cfg, seed=7)
        buf = io.BytesIO()
        interchange.save_filter(params, buf)
        with pytest.raises(InterchangeError, match="EOF"):
            interchange.load_filter(io.BytesIO(buf.getvalue()[:-8]))


class TestMapFormat:
    def test_roundtrip(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(0.01, 0.99, size=(5, 7)).astype(np.float32)
        anomaly_map = AnomalyMap(values=values, source_height=64, source_width=48)
        buf = io.BytesIO()
        interchange.save_map(anomaly_map, buf)
        buf.seek(0)
        loaded = interchange.load_map(buf)
        np.testing.assert_array_equal(loaded.values.astype(np.float32), values)
        assert (loaded.source_height, loaded.source_width) == (64, 48)

    def test_wrong_magic(self):
        with pytest.raises(InterchangeError, match="not a RAIDMAP1"):
            interchange.load_map(io.BytesIO(b"RAIDFLT1" + b"\x00" * 32))

    def test_every_loader_rejects_every_other_magic(self):
        rng = np.random.default_rng(9)
        embedding = random_embedding(rng)
        payloads = {}
        buf = io.BytesIO()
        interchange.save_embedding_set(embedding, buf)
        payloads["emb"] = buf.getvalue()
        anomaly_map = AnomalyMap(values=np.full((2, 2), 0.5), source_height=4, source_width=4)
        buf = io.BytesIO()
        interchange.save_map(anomaly_map, buf)
        payloads["map"] = buf.getvalue()
        loaders = {
            "emb": interchange.load_embedding_set,
            "db": interchange.load_database,
            "flt": interchange.load_filter,
            "map": interchange.load_map,
        }
        for kind, loader in loaders.items():
            for payload_kind, payload in payloads.items():
                if (kind, payload_kind) in (("emb", "emb"), ("map", "map")):
                    continue
                with pytest.raises(InterchangeError):
                    loader(io.BytesIO(payload))


class TestMaskPgm:
    def test_roundtrip(self):
        rng = np.random.default_rng(10)
        mask = GroundTruthMask(image_id="m", mask=(rng.uniform(size=(6, 9)) < 0.4).astype(np.uint8))
        buf = io.BytesIO()
        interchange.save_mask_pgm(mask, buf)
        buf.seek(0)
        loaded = interchange.load_mask_pgm(buf, image_id="m")
        np.testing.assert_array_equal(loaded.mask, mask.mask)

    def test_threshold_at_128(self):
        payload = b"P5\n2 1\n255\n" + bytes([127, 128])
        loaded = interchange.load_mask_pgm(io.BytesIO(payload))
        np.testing.assert_array_equal(loaded.mask, [[0, 1]])

    def test_non_pgm_rejected(self):
        with pytest.raises(InterchangeError):
            interchange.load_mask_pgm(io.BytesIO(b"P6\n1 1\n255\n\x00"))
