"""Binary file formats shared by every pipeline stage.

Four formats, one magic each:

  RAIDEMB1  token embedding set (CLS vector + patch grid)
  RAIDDB01  hierarchical database (class / semantic / instance levels)
  RAIDFLT1  filter parameters (config record + tensors in declared order)
  RAIDMAP1  anomaly map (H'xW' float32 + source dimensions)

All integers are little-endian u32 unless stated otherwise; all floats are
little-endian IEEE-754 float32; grids are row-major (y, x, channel).  Saves
are deterministic: identical input produces identical bytes.  Ground-truth
masks travel as 8-bit binary PGM (P5) with values {0, 255}, thresholded at
128 on load.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .database import HierarchicalDatabase, InstanceBucket
from .errors import ConfigMismatchError, InterchangeError
from .moe_filter import FilterConfig, FilterParameters
from .types import AnomalyMap, GroundTruthMask, TokenEmbeddingSet

MAGIC_EMBEDDING = b"RAIDEMB1"
MAGIC_DATABASE = b"RAIDDB01"
MAGIC_FILTER = b"RAIDFLT1"
MAGIC_MAP = b"RAIDMAP1"

_KNOWN_MAGICS = (MAGIC_EMBEDDING, MAGIC_DATABASE, MAGIC_FILTER, MAGIC_MAP)


def _read_exact(source: BinaryIO, n: int) -> bytes:
    data = source.read(n)
    if data is None or len(data) != n:
        raise InterchangeError("unexpected EOF")
    return data


def _read_u32(source: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(source, 4))[0]


def _write_u32(sink: BinaryIO, value: int) -> int:
    sink.write(struct.pack("<I", value))
    return 4


def _write_string(sink: BinaryIO, text: str) -> int:
    raw = text.encode("utf-8")
    sink.write(struct.pack("<I", len(raw)))
    sink.write(raw)
    return 4 + len(raw)


def _read_string(source: BinaryIO) -> str:
    length = _read_u32(source)
    try:
        return _read_exact(source, length).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InterchangeError("corrupt payload: invalid UTF-8 string") from exc


def _write_f32_array(sink: BinaryIO, array: np.ndarray) -> int:
    data = np.ascontiguousarray(array, dtype="<f4").tobytes()
    sink.write(data)
    return len(data)


def _read_f32_array(source: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(source, count * 4)
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if not np.isfinite(arr).all():
        raise InterchangeError("corrupt payload: non-finite value")
    return arr


def _write_i32_array(sink: BinaryIO, array: np.ndarray) -> int:
    data = np.ascontiguousarray(array, dtype="<i4").tobytes()
    sink.write(data)
    return len(data)


def _read_i32_array(source: BinaryIO, count: int) -> np.ndarray:
    raw = _read_exact(source, count * 4)
    return np.frombuffer(raw, dtype="<i4").copy()


def _check_magic(source: BinaryIO, expected: bytes, kind: str) -> None:
    magic = _read_exact(source, 8)
    if magic != expected:
        raise InterchangeError(f"not a {kind} file (magic {magic!r})")


# ---------------------------------------------------------------------------
# RAIDEMB1: token embedding sets
# ---------------------------------------------------------------------------

def save_embedding_set(embedding: TokenEmbeddingSet, sink: BinaryIO) -> int:
    """Serialize an embedding set; returns the number of bytes written."""
    embedding.validate()
    h, w, d = embedding.patch_tokens.shape
    n = 0
    sink.write(MAGIC_EMBEDDING)
    n += 8
    for value in (d, h, w, embedding.source_height, embedding.source_width):
        n += _write_u32(sink, value)
    n += _write_string(sink, embedding.image_id)
    if embedding.class_label is None:
        sink.write(b"\x00")
        n += 1
    else:
        sink.write(b"\x01")
        n += 1
        n += _write_string(sink, embedding.class_label)
    n += _write_f32_array(sink, embedding.cls_token)
    n += _write_f32_array(sink, embedding.patch_tokens)
    return n


def load_embedding_set(source: BinaryIO) -> TokenEmbeddingSet:
    _check_magic(source, MAGIC_EMBEDDING, "RAIDEMB1")
    d = _read_u32(source)
    h = _read_u32(source)
    w = _read_u32(source)
    source_h = _read_u32(source)
    source_w = _read_u32(source)
    image_id = _read_string(source)
    flag = _read_exact(source, 1)[0]
    label = _read_string(source) if flag else None
    if d < 1 or h < 1 or w < 1:
        raise InterchangeError("corrupt payload: zero dimension")
    cls_token = _read_f32_array(source, (d,))
    patches = _read_f32_array(source, (h, w, d))
    embedding = TokenEmbeddingSet(
        image_id=image_id,
        cls_token=cls_token,
        patch_tokens=patches,
        source_height=source_h,
        source_width=source_w,
        class_label=label,
    )
    embedding.validate()
    return embedding


# ---------------------------------------------------------------------------
# RAIDDB01: hierarchical database
# ---------------------------------------------------------------------------

def save_database(db: HierarchicalDatabase, sink: BinaryIO) -> int:
    """Serialize a database: class level, then semantic level, then buckets."""
    db.validate()
    n = 0
    sink.write(MAGIC_DATABASE)
    n += 8
    n += _write_u32(sink, db.dim)
    n += _write_u32(sink, db.num_classes)
    n += _write_u32(sink, len(db.image_id_table))
    for image_id in db.image_id_table:
        n += _write_string(sink, image_id)
    n += _write_f32_array(sink, db.class_prototypes)
    for protos in db.semantic_prototypes:
        n += _write_u32(sink, protos.shape[0])
        n += _write_f32_array(sink, protos)
    for class_buckets in db.buckets:
        for bucket in class_buckets:
            n += _write_u32(sink, bucket.size)
            n += _write_i32_array(sink, bucket.image_ids)
            n += _write_i32_array(sink, bucket.ys)
            n += _write_i32_array(sink, bucket.xs)
            n += _write_f32_array(sink, bucket.tokens)
    return n


def load_database(source: BinaryIO) -> HierarchicalDatabase:
    _check_magic(source, MAGIC_DATABASE, "RAIDDB01")
    dim = _read_u32(source)
    num_classes = _read_u32(source)
    if dim < 1:
        raise InterchangeError("corrupt payload: zero dimension")
    table_size = _read_u32(source)
    image_id_table = [_read_string(source) for _ in range(table_size)]
    class_prototypes = _read_f32_array(source, (num_classes, dim))
    semantic_prototypes = []
    for _ in range(num_classes):
        j = _read_u32(source)
        semantic_prototypes.append(_read_f32_array(source, (j, dim)))
    buckets: list[list[InstanceBucket]] = []
    for c in range(num_classes):
        class_buckets = []
        for _ in range(semantic_prototypes[c].shape[0]):
            size = _read_u32(source)
            image_ids = _read_i32_array(source, size)
            ys = _read_i32_array(source, size)
            xs = _read_i32_array(source, size)
            tokens = _read_f32_array(source, (size, dim))
            class_buckets.append(InstanceBucket(tokens=tokens, image_ids=image_ids, ys=ys, xs=xs))
        buckets.append(class_buckets)
    db = HierarchicalDatabase(
        dim=dim,
        class_prototypes=class_prototypes,
        semantic_prototypes=semantic_prototypes,
        buckets=buckets,
        image_id_table=image_id_table,
    )
    db.validate()
    return db


# ---------------------------------------------------------------------------
# RAIDFLT1: filter parameters
# ---------------------------------------------------------------------------

def save_filter(params: FilterParameters, sink: BinaryIO) -> int:
    """Serialize filter parameters: config record, then tensors in declared order."""
    cfg = params.config
    n = 0
    sink.write(MAGIC_FILTER)
    n += 8
    for value in (cfg.dim, cfg.volume_depth, cfg.stage1_experts, cfg.stage2_experts, cfg.active_experts):
        n += _write_u32(sink, value)
    sink.write(struct.pack("<d", cfg.beta))
    n += 8
    for _, tensor in params.param_items():
        n += _write_f32_array(sink, tensor)
    return n


def load_filter(source: BinaryIO, expected: FilterConfig | None = None) -> FilterParameters:
    _check_magic(source, MAGIC_FILTER, "RAIDFLT1")
    dim = _read_u32(source)
    volume_depth = _read_u32(source)
    m1 = _read_u32(source)
    m2 = _read_u32(source)
    active = _read_u32(source)
    beta = struct.unpack("<d", _read_exact(source, 8))[0]
    cfg = FilterConfig(
        dim=dim,
        volume_depth=volume_depth,
        stage1_experts=m1,
        stage2_experts=m2,
        active_experts=active,
        beta=float(beta),
    )
    if expected is not None:
        mismatches = []
        for name in ("dim", "volume_depth", "stage1_experts", "stage2_experts", "active_experts"):
            if getattr(expected, name) != getattr(cfg, name):
                mismatches.append(f"{name}={getattr(cfg, name)} (expected {getattr(expected, name)})")
        if mismatches:
            raise ConfigMismatchError("incompatible configuration: " + ", ".join(mismatches))
    params = FilterParameters.zeros(cfg)
    for name, tensor in params.param_items():
        loaded = _read_f32_array(source, tensor.shape)
        tensor[...] = loaded.astype(np.float64)
    return params


# ---------------------------------------------------------------------------
# RAIDMAP1: anomaly maps
# ---------------------------------------------------------------------------

def save_map(anomaly_map: AnomalyMap, sink: BinaryIO) -> int:
    anomaly_map.validate()
    h, w = anomaly_map.values.shape
    n = 0
    sink.write(MAGIC_MAP)
    n += 8
    for value in (h, w, anomaly_map.source_height, anomaly_map.source_width):
        n += _write_u32(sink, value)
    n += _write_f32_array(sink, anomaly_map.values)
    return n


def load_map(source: BinaryIO) -> AnomalyMap:
    _check_magic(source, MAGIC_MAP, "RAIDMAP1")
    h = _read_u32(source)
    w = _read_u32(source)
    source_h = _read_u32(source)
    source_w = _read_u32(source)
    if h < 1 or w < 1:
        raise InterchangeError("corrupt payload: zero dimension")
    values = _read_f32_array(source, (h, w))
    anomaly_map = AnomalyMap(values=values, source_height=source_h, source_width=source_w)
    anomaly_map.validate()
    return anomaly_map


# ---------------------------------------------------------------------------
# PGM masks and visualizations
# ---------------------------------------------------------------------------

def save_mask_pgm(mask: GroundTruthMask, sink: BinaryIO) -> int:
    """Binary PGM (P5, maxval 255) with anomalous pixels at 255."""
    mask.validate()
    h, w = mask.mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    sink.write(header)
    payload = (mask.mask.astype(np.uint8) * 255).tobytes()
    sink.write(payload)
    return len(header) + len(payload)


def load_mask_pgm(source: BinaryIO, image_id: str = "") -> GroundTruthMask:
    """Read a P5 PGM and threshold at 128: pixels >= 128 become anomalous."""
    grid = _read_pgm(source)
    return GroundTruthMask(image_id=image_id, mask=(grid >= 128).astype(np.uint8))


def save_map_pgm(anomaly_map: AnomalyMap, sink: BinaryIO) -> int:
    """Inspectable visualization: map values scaled to [0, 255]."""
    h, w = anomaly_map.values.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    sink.write(header)
    scaled = np.clip(np.rint(anomaly_map.values * 255.0), 0, 255).astype(np.uint8)
    sink.write(scaled.tobytes())
    return len(header) + h * w


def _read_pgm(source: BinaryIO) -> np.ndarray:
    if _read_exact(source, 2) != b"P5":
        raise InterchangeError("not a P5 PGM file")

    def next_token() -> bytes:
        tok = b""
        while True:
            ch = _read_exact(source, 1)
            if ch.isspace():
                if tok:
                    return tok
                continue
            if ch == b"#":  # comment runs to end of line
                while _read_exact(source, 1) != b"\n":
                    pass
                continue
            tok += ch

    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    if width < 1 or height < 1 or maxval < 1 or maxval > 255:
        raise InterchangeError("corrupt payload: bad PGM header")
    raw = _read_exact(source, width * height)
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()
