/**
 * Deterministic PRNG (splitmix64 over BigInt) with a Box-Muller gaussian.
 * Weight initialization must be bit-reproducible across runs and platforms,
 * so everything stays in double precision with a fixed draw order.
 */

const MASK64 = (1n << 64n) - 1n;

export class Rng {
  private state: bigint;

  constructor(seed: number | bigint) {
    this.state = BigInt(seed) & MASK64;
  }

  /** Next float in [0, 1) with 53 bits of entropy. */
  next(): number {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    z = z ^ (z >> 31n);
    return Number(z >> 11n) / 2 ** 53;
  }

  uniform(low: number, high: number): number {
    return low + (high - low) * this.next();
  }

  gaussian(): number {
    let u = this.next();
    if (u === 0) u = Number.MIN_VALUE;
    const v = this.next();
    return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
  }
}

/** Stable 64-bit FNV-1a hash of a string, for seeding from backbone ids. */
export function hashSeed(text: string): bigint {
  let hash = 0xcbf29ce484222325n;
  for (let i = 0; i < text.length; i++) {
    hash = (hash ^ BigInt(text.charCodeAt(i))) & MASK64;
    hash = (hash * 0x100000001b3n) & MASK64;
  }
  return hash;
}
