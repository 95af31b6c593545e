/**
 * Minimal PNG decoder on top of node's core zlib: 8-bit depth, color types
 * gray / RGB / palette / gray+alpha / RGBA, non-interlaced. Enough for
 * typical dataset images without external dependencies.
 */

import * as zlib from "node:zlib";

export interface DecodedPng {
  width: number;
  height: number;
  /** Interleaved RGB bytes, length width*height*3. */
  rgb: Uint8Array;
}

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

const CHANNELS: Record<number, number> = { 0: 1, 2: 3, 3: 1, 4: 2, 6: 4 };

export function decodePng(raw: Buffer): DecodedPng {
  if (!raw.subarray(0, 8).equals(SIGNATURE)) {
    throw new Error("not a PNG file");
  }
  let offset = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  let palette: Buffer | null = null;
  const idat: Buffer[] = [];

  while (offset < raw.length) {
    const length = raw.readUInt32BE(offset);
    const type = raw.subarray(offset + 4, offset + 8).toString("ascii");
    const body = raw.subarray(offset + 8, offset + 8 + length);
    offset += 12 + length; // length + type + body + crc
    if (type === "IHDR") {
      width = body.readUInt32BE(0);
      height = body.readUInt32BE(4);
      bitDepth = body.readUInt8(8);
      colorType = body.readUInt8(9);
      const interlace = body.readUInt8(12);
      if (bitDepth !== 8) throw new Error(`unsupported PNG bit depth ${bitDepth}`);
      if (!(colorType in CHANNELS)) throw new Error(`unsupported PNG color type ${colorType}`);
      if (interlace !== 0) throw new Error("interlaced PNG not supported");
    } else if (type === "PLTE") {
      palette = Buffer.from(body);
    } else if (type === "IDAT") {
      idat.push(Buffer.from(body));
    } else if (type === "IEND") {
      break;
    }
  }
  if (!width || !height) throw new Error("PNG missing IHDR");

  const channels = CHANNELS[colorType];
  const stride = width * channels;
  const decompressed = zlib.inflateSync(Buffer.concat(idat));
  if (decompressed.length < height * (stride + 1)) {
    throw new Error("PNG payload truncated");
  }

  const pixels = new Uint8Array(height * stride);
  let previous = new Uint8Array(stride);
  for (let y = 0; y < height; y++) {
    const filter = decompressed[y * (stride + 1)];
    const line = decompressed.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const current = pixels.subarray(y * stride, (y + 1) * stride);
    unfilter(filter, line, current, previous, channels);
    previous = current;
  }

  const rgb = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    if (colorType === 2 || colorType === 6) {
      rgb[i * 3] = pixels[i * channels];
      rgb[i * 3 + 1] = pixels[i * channels + 1];
      rgb[i * 3 + 2] = pixels[i * channels + 2];
    } else if (colorType === 0 || colorType === 4) {
      const value = pixels[i * channels];
      rgb[i * 3] = value;
      rgb[i * 3 + 1] = value;
      rgb[i * 3 + 2] = value;
    } else {
      if (!palette) throw new Error("palette PNG missing PLTE");
      const index = pixels[i] * 3;
      rgb[i * 3] = palette[index];
      rgb[i * 3 + 1] = palette[index + 1];
      rgb[i * 3 + 2] = palette[index + 2];
    }
  }
  return { width, height, rgb };
}

function unfilter(
  filter: number,
  line: Uint8Array,
  out: Uint8Array,
  previous: Uint8Array,
  channels: number
): void {
  const n = line.length;
  switch (filter) {
    case 0:
      out.set(line);
      return;
    case 1:
      for (let i = 0; i < n; i++) {
        out[i] = (line[i] + (i >= channels ? out[i - channels] : 0)) & 0xff;
      }
      return;
    case 2:
      for (let i = 0; i < n; i++) {
        out[i] = (line[i] + previous[i]) & 0xff;
      }
      return;
    case 3:
      for (let i = 0; i < n; i++) {
        const left = i >= channels ? out[i - channels] : 0;
        out[i] = (line[i] + ((left + previous[i]) >> 1)) & 0xff;
      }
      return;
    case 4:
      for (let i = 0; i < n; i++) {
        const left = i >= channels ? out[i - channels] : 0;
        const up = previous[i];
        const upLeft = i >= channels ? previous[i - channels] : 0;
        out[i] = (line[i] + paeth(left, up, upLeft)) & 0xff;
      }
      return;
    default:
      throw new Error(`unsupported PNG filter ${filter}`);
  }
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

/** Encode interleaved RGB bytes as a non-interlaced 8-bit RGB PNG. */
export function encodePng(width: number, height: number, rgb: Uint8Array): Buffer {
  const stride = width * 3;
  const filtered = Buffer.alloc(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    filtered[y * (stride + 1)] = 0; // filter: None
    filtered.set(rgb.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  const idat = zlib.deflateSync(filtered);
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(width, 0);
  ihdr.writeUInt32BE(height, 4);
  ihdr.writeUInt8(8, 8); // bit depth
  ihdr.writeUInt8(2, 9); // color type RGB
  const chunks = [
    SIGNATURE,
    chunk("IHDR", ihdr),
    chunk("IDAT", idat),
    chunk("IEND", Buffer.alloc(0)),
  ];
  return Buffer.concat(chunks);
}

function chunk(type: string, body: Buffer): Buffer {
  const out = Buffer.alloc(12 + body.length);
  out.writeUInt32BE(body.length, 0);
  out.write(type, 4, "ascii");
  body.copy(out, 8);
  out.writeUInt32BE(crc32(out.subarray(4, 8 + body.length)), 8 + body.length);
  return out;
}

let CRC_TABLE: Uint32Array | null = null;

function crc32(data: Buffer): number {
  if (!CRC_TABLE) {
    CRC_TABLE = new Uint32Array(256);
    for (let i = 0; i < 256; i++) {
      let value = i;
      for (let bit = 0; bit < 8; bit++) {
        value = value & 1 ? 0xedb88320 ^ (value >>> 1) : value >>> 1;
      }
      CRC_TABLE[i] = value >>> 0;
    }
  }
  let crc = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    crc = CRC_TABLE[(crc ^ data[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}
