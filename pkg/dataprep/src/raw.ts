/**
 * Writer (and test-side reader) for the core engine's raw tensor files and
 * dataset manifest, matching docs/formats.md in the core repository byte for
 * byte: magic "RAWTNSR1", u32 version 1, u32 dtype code (1 = float32),
 * u32 ndim, u64 extents, little-endian row-major payload.
 */

import { mkdirSync, writeFileSync, readFileSync } from "node:fs";
import { dirname } from "node:path";

export const RAW_MAGIC = "RAWTNSR1";
export const DTYPE_FLOAT32 = 1;

export function encodeRawTensor(shape: number[], payload: Float32Array): Buffer {
  const header = Buffer.alloc(8 + 4 + 4 + 4 + 8 * shape.length);
  header.write(RAW_MAGIC, 0, "ascii");
  header.writeUInt32LE(1, 8);
  header.writeUInt32LE(DTYPE_FLOAT32, 12);
  header.writeUInt32LE(shape.length, 16);
  shape.forEach((extent, i) => header.writeBigUInt64LE(BigInt(extent), 20 + 8 * i));
  const body = Buffer.from(payload.buffer, payload.byteOffset, payload.byteLength);
  return Buffer.concat([header, body]);
}

export function writeRawTensor(path: string, shape: number[], payload: Float32Array): void {
  const expected = shape.reduce((a, b) => a * b, 1);
  if (payload.length !== expected) {
    throw new Error(`payload length ${payload.length} != prod(shape) ${expected}`);
  }
  mkdirSync(dirname(path), { recursive: true });
  writeFileSync(path, encodeRawTensor(shape, payload));
}

export function readRawTensor(path: string): { shape: number[]; data: Float32Array } {
  const buf = readFileSync(path);
  if (buf.toString("ascii", 0, 8) !== RAW_MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const version = buf.readUInt32LE(8);
  const code = buf.readUInt32LE(12);
  if (version !== 1 || code !== DTYPE_FLOAT32) {
    throw new Error(`${path}: unsupported version ${version} / dtype ${code}`);
  }
  const ndim = buf.readUInt32LE(16);
  const shape: number[] = [];
  for (let i = 0; i < ndim; i++) {
    shape.push(Number(buf.readBigUInt64LE(20 + 8 * i)));
  }
  const offset = 20 + 8 * ndim;
  const count = shape.reduce((a, b) => a * b, 1);
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = buf.readFloatLE(offset + 4 * i);
  }
  return { shape, data };
}

export interface ManifestInput {
  modalities: string[];
  ranges: Map<string, [number, number]>;
  counts: Map<string, number>;
  contentHash?: string;
}

/** Python repr-compatible float formatting: integral floats get a ".0". */
export function formatFloat(x: number): string {
  if (Number.isInteger(x)) {
    return `${x}.0`;
  }
  return `${x}`;
}

export function renderManifest(input: ManifestInput): string {
  const lines = [`modalities = ${input.modalities.join(",")}`];
  for (const mod of input.modalities) {
    const range = input.ranges.get(mod);
    if (!range) {
      throw new Error(`no range recorded for modality '${mod}'`);
    }
    lines.push(`range.${mod} = ${formatFloat(range[0])},${formatFloat(range[1])}`);
  }
  const splits = [...input.counts.keys()].sort();
  for (const split of splits) {
    lines.push(`count.${split} = ${input.counts.get(split)}`);
  }
  if (input.contentHash) {
    lines.push(`hash = ${input.contentHash}`);
  }
  return lines.join("\n") + "\n";
}

export function writeManifest(path: string, input: ManifestInput): void {
  mkdirSync(dirname(path), { recursive: true });
  writeFileSync(path, renderManifest(input));
}
