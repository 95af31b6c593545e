/**
 * RAIDEMB1 writer: the bit-exact embedding interchange format consumed by the
 * detection engine.
 *
 * Layout (all integers little-endian u32, all floats little-endian float32):
 *   magic "RAIDEMB1" (8 ASCII bytes)
 *   D, H', W', source_height, source_width
 *   image id (u32 length + UTF-8 bytes)
 *   label flag u8 (0/1), then u32 length + UTF-8 label when present
 *   CLS token: D float32
 *   patch tokens: H'*W'*D float32, row-major (y, x, d)
 */

export interface TokenEmbeddingSet {
  imageId: string;
  clsToken: Float32Array; // (D)
  patchTokens: Float32Array; // (H' * W' * D), row-major (y, x, d)
  gridHeight: number;
  gridWidth: number;
  dim: number;
  sourceHeight: number;
  sourceWidth: number;
  classLabel?: string;
}

const MAGIC = "RAIDEMB1";

function assertFinite(values: Float32Array, what: string): void {
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) {
      throw new Error(`non-finite value in ${what} at index ${i}`);
    }
  }
}

export function encodeEmbeddingSet(set: TokenEmbeddingSet): Buffer {
  const { dim, gridHeight, gridWidth } = set;
  if (dim < 1 || gridHeight < 1 || gridWidth < 1) {
    throw new Error("dimensions must be positive");
  }
  if (set.clsToken.length !== dim) {
    throw new Error(`CLS token has ${set.clsToken.length} values, expected ${dim}`);
  }
  if (set.patchTokens.length !== gridHeight * gridWidth * dim) {
    throw new Error("patch token buffer does not match the grid");
  }
  assertFinite(set.clsToken, "CLS token");
  assertFinite(set.patchTokens, "patch tokens");

  const idBytes = Buffer.from(set.imageId, "utf-8");
  const labelBytes =
    set.classLabel === undefined ? null : Buffer.from(set.classLabel, "utf-8");
  const headerSize =
    8 + 5 * 4 + 4 + idBytes.length + 1 + (labelBytes ? 4 + labelBytes.length : 0);
  const total = headerSize + 4 * (dim + set.patchTokens.length);
  const out = Buffer.alloc(total);

  let offset = 0;
  out.write(MAGIC, offset, "ascii");
  offset += 8;
  for (const value of [dim, gridHeight, gridWidth, set.sourceHeight, set.sourceWidth]) {
    out.writeUInt32LE(value, offset);
    offset += 4;
  }
  out.writeUInt32LE(idBytes.length, offset);
  offset += 4;
  idBytes.copy(out, offset);
  offset += idBytes.length;
  if (labelBytes) {
    out.writeUInt8(1, offset);
    offset += 1;
    out.writeUInt32LE(labelBytes.length, offset);
    offset += 4;
    labelBytes.copy(out, offset);
    offset += labelBytes.length;
  } else {
    out.writeUInt8(0, offset);
    offset += 1;
  }
  for (let i = 0; i < set.clsToken.length; i++) {
    out.writeFloatLE(set.clsToken[i], offset);
    offset += 4;
  }
  for (let i = 0; i < set.patchTokens.length; i++) {
    out.writeFloatLE(set.patchTokens[i], offset);
    offset += 4;
  }
  if (offset !== total) {
    throw new Error(`encoder bug: wrote ${offset} of ${total} bytes`);
  }
  return out;
}

/** Minimal reader used by the exporter's own tests. */
export function decodeEmbeddingSet(data: Buffer): TokenEmbeddingSet {
  if (data.subarray(0, 8).toString("ascii") !== MAGIC) {
    throw new Error("not a RAIDEMB1 buffer");
  }
  let offset = 8;
  const u32 = () => {
    const value = data.readUInt32LE(offset);
    offset += 4;
    return value;
  };
  const dim = u32();
  const gridHeight = u32();
  const gridWidth = u32();
  const sourceHeight = u32();
  const sourceWidth = u32();
  const idLength = u32();
  const imageId = data.subarray(offset, offset + idLength).toString("utf-8");
  offset += idLength;
  const hasLabel = data.readUInt8(offset);
  offset += 1;
  let classLabel: string | undefined;
  if (hasLabel) {
    const labelLength = u32();
    classLabel = data.subarray(offset, offset + labelLength).toString("utf-8");
    offset += labelLength;
  }
  const clsToken = new Float32Array(dim);
  for (let i = 0; i < dim; i++) {
    clsToken[i] = data.readFloatLE(offset);
    offset += 4;
  }
  const patchTokens = new Float32Array(gridHeight * gridWidth * dim);
  for (let i = 0; i < patchTokens.length; i++) {
    patchTokens[i] = data.readFloatLE(offset);
    offset += 4;
  }
  return {
    imageId,
    clsToken,
    patchTokens,
    gridHeight,
    gridWidth,
    dim,
    sourceHeight,
    sourceWidth,
    classLabel,
  };
}
