/**
 * Vision-transformer token extractor with deterministic weights.
 *
 * No pretrained checkpoints are bundled: weights are derived from a seeded
 * PRNG keyed by the backbone id, so exports are bit-reproducible anywhere.
 * A JSON weights file with the same tensor names can be supplied to run a
 * real checkpoint instead.
 *
 * Backbone ids follow `seeded-vit-p{patch}-d{dim}-l{layers}-h{heads}`,
 * e.g. the default "seeded-vit-p16-d64-l2-h4".
 */

import * as fs from "node:fs";
import { Rng, hashSeed } from "./rng";
import { RgbImage } from "./image";

export interface BackboneConfig {
  id: string;
  patchSize: number;
  dim: number;
  layers: number;
  heads: number;
  mlpRatio: number;
}

export interface TokenOutput {
  cls: Float32Array;
  patches: Float32Array; // (gridH * gridW * dim)
  gridHeight: number;
  gridWidth: number;
}

const ID_PATTERN = /^seeded-vit-p(\d+)-d(\d+)-l(\d+)-h(\d+)$/;

export function parseBackboneId(id: string): BackboneConfig {
  const match = ID_PATTERN.exec(id);
  if (!match) {
    throw new Error(
      `unknown backbone id '${id}' (expected seeded-vit-p{patch}-d{dim}-l{layers}-h{heads})`
    );
  }
  const [, patch, dim, layers, heads] = match.map(Number) as unknown as number[];
  const config: BackboneConfig = {
    id,
    patchSize: match ? Number(match[1]) : 16,
    dim: Number(match[2]),
    layers: Number(match[3]),
    heads: Number(match[4]),
    mlpRatio: 2,
  };
  if (config.dim % config.heads !== 0) {
    throw new Error(`dim ${config.dim} not divisible by heads ${config.heads}`);
  }
  return config;
}

/** Snap a target resolution to the nearest multiple of the patch size. */
export function snapResolution(target: number, patchSize: number): number {
  const patches = Math.max(1, Math.round(target / patchSize));
  return patches * patchSize;
}

type Tensor = Float64Array<ArrayBufferLike>;

interface BlockWeights {
  ln1Gamma: Tensor;
  ln1Beta: Tensor;
  wq: Tensor;
  wk: Tensor;
  wv: Tensor;
  wo: Tensor;
  ln2Gamma: Tensor;
  ln2Beta: Tensor;
  mlpW1: Tensor;
  mlpB1: Tensor;
  mlpW2: Tensor;
  mlpB2: Tensor;
}

interface Weights {
  patchProj: Tensor; // (patch*patch*3, dim)
  patchBias: Tensor;
  clsToken: Tensor;
  blocks: BlockWeights[];
  lnFinalGamma: Tensor;
  lnFinalBeta: Tensor;
}

export class Backbone {
  readonly config: BackboneConfig;
  private weights: Weights;
  private posCache = new Map<number, Tensor>();

  constructor(config: BackboneConfig, weightsFile?: string) {
    this.config = config;
    this.weights = weightsFile ? loadWeights(weightsFile, config) : seedWeights(config);
  }

  /** CLS token plus patch-token grid for a square image. */
  forward(image: RgbImage): TokenOutput {
    const { patchSize, dim } = this.config;
    if (image.width % patchSize !== 0 || image.height % patchSize !== 0) {
      throw new Error("image resolution must be a multiple of the patch size");
    }
    const gridW = image.width / patchSize;
    const gridH = image.height / patchSize;
    const n = gridH * gridW + 1; // CLS first

    let tokens: Tensor = new Float64Array(n * dim);
    tokens.set(this.weights.clsToken, 0);
    const patchDim = patchSize * patchSize * 3;
    const patch = new Float64Array(patchDim);
    for (let gy = 0; gy < gridH; gy++) {
      for (let gx = 0; gx < gridW; gx++) {
        let i = 0;
        for (let py = 0; py < patchSize; py++) {
          for (let px = 0; px < patchSize; px++) {
            const sy = gy * patchSize + py;
            const sx = gx * patchSize + px;
            for (let c = 0; c < 3; c++) {
              // standard [-1, 1] input normalization
              patch[i++] = image.data[(sy * image.width + sx) * 3 + c] * 2 - 1;
            }
          }
        }
        const row = (1 + gy * gridW + gx) * dim;
        for (let d = 0; d < dim; d++) {
          let acc = this.weights.patchBias[d];
          for (let k = 0; k < patchDim; k++) {
            acc += patch[k] * this.weights.patchProj[k * dim + d];
          }
          tokens[row + d] = acc;
        }
      }
    }

    const pos = this.positionalEmbedding(n);
    for (let i = 0; i < tokens.length; i++) tokens[i] += pos[i];

    for (const block of this.weights.blocks) {
      tokens = this.transformerBlock(tokens, n, block);
    }
    layerNormInPlace(tokens, n, dim, this.weights.lnFinalGamma, this.weights.lnFinalBeta);

    const cls = new Float32Array(dim);
    for (let d = 0; d < dim; d++) cls[d] = Math.fround(tokens[d]);
    const patches = new Float32Array((n - 1) * dim);
    for (let i = 0; i < patches.length; i++) patches[i] = Math.fround(tokens[dim + i]);
    return { cls, patches, gridHeight: gridH, gridWidth: gridW };
  }

  private positionalEmbedding(n: number): Tensor {
    const cached = this.posCache.get(n);
    if (cached) return cached;
    const { dim } = this.config;
    const rng = new Rng(hashSeed(`${this.config.id}/pos/${n}`));
    const pos = new Float64Array(n * dim);
    for (let i = 0; i < pos.length; i++) pos[i] = 0.02 * rng.gaussian();
    this.posCache.set(n, pos);
    return pos;
  }

  private transformerBlock(tokens: Tensor, n: number, block: BlockWeights): Tensor {
    const { dim, heads } = this.config;
    const headDim = dim / heads;
    const normed = tokens.slice();
    layerNormInPlace(normed, n, dim, block.ln1Gamma, block.ln1Beta);

    const q = matmul(normed, block.wq, n, dim, dim);
    const k = matmul(normed, block.wk, n, dim, dim);
    const v = matmul(normed, block.wv, n, dim, dim);
    const attnOut = new Float64Array(n * dim);
    const scale = 1 / Math.sqrt(headDim);
    const scores = new Float64Array(n);
    for (let h = 0; h < heads; h++) {
      const base = h * headDim;
      for (let i = 0; i < n; i++) {
        let max = -Infinity;
        for (let j = 0; j < n; j++) {
          let dot = 0;
          for (let d = 0; d < headDim; d++) {
            dot += q[i * dim + base + d] * k[j * dim + base + d];
          }
          scores[j] = dot * scale;
          if (scores[j] > max) max = scores[j];
        }
        let total = 0;
        for (let j = 0; j < n; j++) {
          scores[j] = Math.exp(scores[j] - max);
          total += scores[j];
        }
        for (let j = 0; j < n; j++) {
          const weight = scores[j] / total;
          for (let d = 0; d < headDim; d++) {
            attnOut[i * dim + base + d] += weight * v[j * dim + base + d];
          }
        }
      }
    }
    const projected = matmul(attnOut, block.wo, n, dim, dim);
    const afterAttn = new Float64Array(n * dim);
    for (let i = 0; i < afterAttn.length; i++) afterAttn[i] = tokens[i] + projected[i];

    const normed2 = afterAttn.slice();
    layerNormInPlace(normed2, n, dim, block.ln2Gamma, block.ln2Beta);
    const hiddenDim = dim * this.config.mlpRatio;
    const hidden = matmul(normed2, block.mlpW1, n, dim, hiddenDim);
    for (let i = 0; i < n; i++) {
      for (let d = 0; d < hiddenDim; d++) {
        const x = hidden[i * hiddenDim + d] + block.mlpB1[d];
        hidden[i * hiddenDim + d] = gelu(x);
      }
    }
    const mlpOut = matmul(hidden, block.mlpW2, n, hiddenDim, dim);
    const out = new Float64Array(n * dim);
    for (let i = 0; i < n; i++) {
      for (let d = 0; d < dim; d++) {
        out[i * dim + d] = afterAttn[i * dim + d] + mlpOut[i * dim + d] + block.mlpB2[d];
      }
    }
    return out;
  }
}

function gelu(x: number): number {
  return 0.5 * x * (1 + Math.tanh(Math.sqrt(2 / Math.PI) * (x + 0.044715 * x ** 3)));
}

function matmul(a: Tensor, b: Tensor, n: number, inner: number, outDim: number): Tensor {
  const out = new Float64Array(n * outDim);
  for (let i = 0; i < n; i++) {
    for (let k = 0; k < inner; k++) {
      const scale = a[i * inner + k];
      if (scale === 0) continue;
      const row = k * outDim;
      for (let j = 0; j < outDim; j++) {
        out[i * outDim + j] += scale * b[row + j];
      }
    }
  }
  return out;
}

function layerNormInPlace(tokens: Tensor, n: number, dim: number, gamma: Tensor, beta: Tensor): void {
  for (let i = 0; i < n; i++) {
    let mean = 0;
    for (let d = 0; d < dim; d++) mean += tokens[i * dim + d];
    mean /= dim;
    let variance = 0;
    for (let d = 0; d < dim; d++) {
      const delta = tokens[i * dim + d] - mean;
      variance += delta * delta;
    }
    variance /= dim;
    const inv = 1 / Math.sqrt(variance + 1e-6);
    for (let d = 0; d < dim; d++) {
      tokens[i * dim + d] = (tokens[i * dim + d] - mean) * inv * gamma[d] + beta[d];
    }
  }
}

function seedWeights(config: BackboneConfig): Weights {
  const rng = new Rng(hashSeed(config.id));
  const { dim, patchSize } = config;
  const patchDim = patchSize * patchSize * 3;
  const hiddenDim = dim * config.mlpRatio;
  const init = (rows: number, cols: number) => {
    const bound = 1 / Math.sqrt(rows);
    const out = new Float64Array(rows * cols);
    for (let i = 0; i < out.length; i++) out[i] = rng.uniform(-bound, bound);
    return out;
  };
  const ones = (size: number) => new Float64Array(size).fill(1);
  const zeros = (size: number) => new Float64Array(size);
  const gaussians = (size: number, scale: number) => {
    const out = new Float64Array(size);
    for (let i = 0; i < size; i++) out[i] = scale * rng.gaussian();
    return out;
  };

  const blocks: BlockWeights[] = [];
  for (let layer = 0; layer < config.layers; layer++) {
    blocks.push({
      ln1Gamma: ones(dim),
      ln1Beta: zeros(dim),
      wq: init(dim, dim),
      wk: init(dim, dim),
      wv: init(dim, dim),
      wo: init(dim, dim),
      ln2Gamma: ones(dim),
      ln2Beta: zeros(dim),
      mlpW1: init(dim, hiddenDim),
      mlpB1: zeros(hiddenDim),
      mlpW2: init(hiddenDim, dim),
      mlpB2: zeros(dim),
    });
  }
  return {
    patchProj: init(patchDim, dim),
    patchBias: zeros(dim),
    clsToken: gaussians(dim, 0.02),
    blocks,
    lnFinalGamma: ones(dim),
    lnFinalBeta: zeros(dim),
  };
}

function loadWeights(path: string, config: BackboneConfig): Weights {
  let parsed: Record<string, number[]>;
  try {
    parsed = JSON.parse(fs.readFileSync(path, "utf-8"));
  } catch (error) {
    throw new Error(`failed to load backbone weights from ${path}: ${error}`);
  }
  const take = (name: string, size: number): Float64Array => {
    const values = parsed[name];
    if (!values || values.length !== size) {
      throw new Error(`weights file missing tensor '${name}' of size ${size}`);
    }
    return Float64Array.from(values);
  };
  const { dim, patchSize } = config;
  const patchDim = patchSize * patchSize * 3;
  const hiddenDim = dim * config.mlpRatio;
  const blocks: BlockWeights[] = [];
  for (let layer = 0; layer < config.layers; layer++) {
    const p = `blocks.${layer}.`;
    blocks.push({
      ln1Gamma: take(p + "ln1.gamma", dim),
      ln1Beta: take(p + "ln1.beta", dim),
      wq: take(p + "wq", dim * dim),
      wk: take(p + "wk", dim * dim),
      wv: take(p + "wv", dim * dim),
      wo: take(p + "wo", dim * dim),
      ln2Gamma: take(p + "ln2.gamma", dim),
      ln2Beta: take(p + "ln2.beta", dim),
      mlpW1: take(p + "mlp.w1", dim * hiddenDim),
      mlpB1: take(p + "mlp.b1", hiddenDim),
      mlpW2: take(p + "mlp.w2", hiddenDim * dim),
      mlpB2: take(p + "mlp.b2", dim),
    });
  }
  return {
    patchProj: take("patch.proj", patchDim * dim),
    patchBias: take("patch.bias", dim),
    clsToken: take("cls", dim),
    blocks,
    lnFinalGamma: take("ln_final.gamma", dim),
    lnFinalBeta: take("ln_final.beta", dim),
  };
}
