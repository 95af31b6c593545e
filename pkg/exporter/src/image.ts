/**
 * Image loading (PNG, binary PPM/PGM; no external dependencies) and bilinear
 * resizing to the backbone's input resolution.
 */

import * as fs from "node:fs";
import { decodePng } from "./png";

export interface RgbImage {
  width: number;
  height: number;
  /** Interleaved RGB in [0, 1], row-major, length width*height*3. */
  data: Float64Array;
}

export function loadImage(path: string): RgbImage {
  const raw = fs.readFileSync(path);
  if (raw.length >= 8 && raw.readUInt32BE(0) === 0x89504e47) {
    return fromPng(raw);
  }
  const magic = raw.subarray(0, 2).toString("ascii");
  if (magic === "P6" || magic === "P5") {
    return fromPnm(raw, magic);
  }
  throw new Error(`unsupported image format: ${path}`);
}

function fromPng(raw: Buffer): RgbImage {
  const png = decodePng(raw);
  const data = new Float64Array(png.width * png.height * 3);
  for (let i = 0; i < data.length; i++) {
    data[i] = png.rgb[i] / 255;
  }
  return { width: png.width, height: png.height, data };
}

function fromPnm(raw: Buffer, magic: "P5" | "P6"): RgbImage {
  let offset = 2;
  const tokens: number[] = [];
  while (tokens.length < 3) {
    while (offset < raw.length && /\s/.test(String.fromCharCode(raw[offset]))) offset++;
    if (raw[offset] === 0x23) {
      // comment to end of line
      while (offset < raw.length && raw[offset] !== 0x0a) offset++;
      continue;
    }
    let token = "";
    while (offset < raw.length && !/\s/.test(String.fromCharCode(raw[offset]))) {
      token += String.fromCharCode(raw[offset]);
      offset++;
    }
    tokens.push(parseInt(token, 10));
  }
  offset++; // single whitespace after maxval
  const [width, height, maxval] = tokens;
  if (!(width > 0 && height > 0 && maxval > 0 && maxval < 256)) {
    throw new Error("bad PNM header");
  }
  const data = new Float64Array(width * height * 3);
  if (magic === "P6") {
    for (let i = 0; i < width * height * 3; i++) {
      data[i] = raw[offset + i] / maxval;
    }
  } else {
    for (let i = 0; i < width * height; i++) {
      const value = raw[offset + i] / maxval;
      data[i * 3] = value;
      data[i * 3 + 1] = value;
      data[i * 3 + 2] = value;
    }
  }
  return { width, height, data };
}

export function writePpm(path: string, image: RgbImage): void {
  const header = Buffer.from(`P6\n${image.width} ${image.height}\n255\n`, "ascii");
  const body = Buffer.alloc(image.width * image.height * 3);
  for (let i = 0; i < body.length; i++) {
    body[i] = Math.max(0, Math.min(255, Math.round(image.data[i] * 255)));
  }
  fs.writeFileSync(path, Buffer.concat([header, body]));
}

/** Bilinear resize with corners mapped to corners. */
export function resizeBilinear(image: RgbImage, width: number, height: number): RgbImage {
  const out = new Float64Array(width * height * 3);
  const scaleY = height > 1 ? (image.height - 1) / (height - 1) : 0;
  const scaleX = width > 1 ? (image.width - 1) / (width - 1) : 0;
  for (let y = 0; y < height; y++) {
    const sy = y * scaleY;
    const y0 = Math.min(Math.floor(sy), image.height - 1);
    const y1 = Math.min(y0 + 1, image.height - 1);
    const wy = sy - y0;
    for (let x = 0; x < width; x++) {
      const sx = x * scaleX;
      const x0 = Math.min(Math.floor(sx), image.width - 1);
      const x1 = Math.min(x0 + 1, image.width - 1);
      const wx = sx - x0;
      for (let c = 0; c < 3; c++) {
        const v00 = image.data[(y0 * image.width + x0) * 3 + c];
        const v01 = image.data[(y0 * image.width + x1) * 3 + c];
        const v10 = image.data[(y1 * image.width + x0) * 3 + c];
        const v11 = image.data[(y1 * image.width + x1) * 3 + c];
        out[(y * width + x) * 3 + c] =
          v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx + v10 * wy * (1 - wx) + v11 * wy * wx;
      }
    }
  }
  return { width, height, data: out };
}
