import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterEach, describe, expect, it } from "vitest";

import { convert, extractSlice, percentile } from "../src/convert.js";
import { parseNifti } from "../src/nifti.js";
import { readRawTensor } from "../src/raw.js";
import { buildNifti } from "./fixtures.js";

const scratch: string[] = [];

function tempDir(): string {
  const dir = mkdtempSync(join(tmpdir(), "dataprep-"));
  scratch.push(dir);
  return dir;
}

afterEach(() => {
  while (scratch.length) {
    rmSync(scratch.pop()!, { recursive: true, force: true });
  }
});

function writeFixtureVolume(
  dir: string,
  name: string,
  value: (x: number, y: number, z: number) => number,
  dims: [number, number, number] = [6, 5, 4]
): string {
  const path = join(dir, name);
  writeFileSync(path, buildNifti({ dims, value }));
  return path;
}

describe("extractSlice", () => {
  it("matches volume[:, :, k] bitwise for axis 2", () => {
    const vol = parseNifti(buildNifti({ dims: [3, 4, 5], value: (x, y, z) => x + 10 * y + 100 * z }));
    const k = 2;
    const slice = extractSlice(vol, 2, k);
    expect(slice.shape).toEqual([3, 4]);
    const expected = new Float32Array(3 * 4);
    for (let x = 0; x < 3; x++) {
      for (let y = 0; y < 4; y++) {
        expected[x * 4 + y] = Math.fround(x + 10 * y + 100 * k);
      }
    }
    expect(Buffer.from(slice.data.buffer).equals(Buffer.from(expected.buffer))).toBe(true);
  });
});

describe("percentile", () => {
  it("interpolates linearly", () => {
    const values = Float64Array.from([0, 1, 2, 3, 4]);
    expect(percentile(values, 0)).toBe(0);
    expect(percentile(values, 100)).toBe(4);
    expect(percentile(values, 50)).toBe(2);
    expect(percentile(values, 62.5)).toBe(2.5);
  });
});

describe("convert", () => {
  it("writes slices bitwise equal to the volume planes", () => {
    const src = tempDir();
    const out = tempDir();
    const vol = writeFixtureVolume(src, "subj1_T1.nii", (x, y, z) => 1 + x + 10 * y + 100 * z);
    writeFixtureVolume(src, "subj1_T2.nii", (x, y, z) => 2 + x + y + z);
    const report = convert([vol, join(src, "subj1_T2.nii")], {
      outRoot: out, split: "train", sliceAxis: 2,
      minForeground: 0.0, clipPercentiles: [0.5, 99.5],
    });
    expect(report.written).toBe(4);
    const parsed = parseNifti(readFileSync(vol));
    for (let k = 0; k < 4; k++) {
      const raw = readRawTensor(join(out, "train", "subj1", `T1_${String(k).padStart(4, "0")}.raw`));
      const expected = extractSlice(parsed, 2, k);
      expect(raw.shape).toEqual(expected.shape);
      expect(Buffer.from(raw.data.buffer).equals(Buffer.from(expected.data.buffer))).toBe(true);
    }
  });

  it("empty slice range writes nothing", () => {
    const src = tempDir();
    const out = tempDir();
    const vol = writeFixtureVolume(src, "s_T1.nii", (x) => x);
    const report = convert([vol], {
      outRoot: out, split: "train", sliceAxis: 2, sliceRange: [2, 2],
      minForeground: 0.0, clipPercentiles: [0.5, 99.5],
    });
    expect(report.written).toBe(0);
    expect(report.errors.some((e) => e.includes("no slices"))).toBe(true);
  });

  it("skips low-foreground slices consistently across modalities", () => {
    const src = tempDir();
    const out = tempDir();
    // plane z=0 is empty in the reference modality
    const a = writeFixtureVolume(src, "s_A.nii", (x, y, z) => (z === 0 ? 0 : 5 + x + y));
    const b = writeFixtureVolume(src, "s_B.nii", (x, y, z) => 1 + x * y * (z + 1));
    const report = convert([a, b], {
      outRoot: out, split: "train", sliceAxis: 2,
      minForeground: 0.05, clipPercentiles: [0.5, 99.5],
    });
    expect(report.written).toBe(3);
    expect(report.skippedSlices).toBe(1);
  });

  it("skips subjects with mismatched extents and reports them", () => {
    const src = tempDir();
    const out = tempDir();
    const good = writeFixtureVolume(src, "good_A.nii", (x) => x + 1);
    writeFixtureVolume(src, "good_B.nii", (x) => 2 * x + 1);
    const badA = writeFixtureVolume(src, "bad_A.nii", (x) => x + 1);
    writeFixtureVolume(src, "bad_B.nii", (x) => x + 1, [3, 3, 3]);
    const report = convert([good, join(src, "good_B.nii"), badA, join(src, "bad_B.nii")], {
      outRoot: out, split: "train", sliceAxis: 2,
      minForeground: 0.0, clipPercentiles: [0.5, 99.5],
    });
    expect(report.skippedSubjects).toEqual(["bad"]);
    expect(report.errors.some((e) => e.includes("extents differ"))).toBe(true);
    expect(report.written).toBe(4);
  });

  it("manifest ranges bound at least 99% of voxel intensities", () => {
    const src = tempDir();
    const out = tempDir();
    const vol = writeFixtureVolume(src, "s_A.nii", (x, y, z) => x + y + z + (x === 0 && y === 0 ? 1000 : 0), [8, 8, 8]);
    convert([vol], {
      outRoot: out, split: "train", sliceAxis: 2,
      minForeground: 0.0, clipPercentiles: [0.5, 99.5],
    });
    const manifest = readFileSync(join(out, "manifest.txt"), "utf-8");
    const match = /range\.A = ([-\d.e]+),([-\d.e]+)/.exec(manifest);
    expect(match).not.toBeNull();
    const [lo, hi] = [Number(match![1]), Number(match![2])];
    const parsed = parseNifti(readFileSync(vol));
    const inside = [...parsed.data].filter((v) => v >= lo && v <= hi).length;
    expect(inside / parsed.data.length).toBeGreaterThanOrEqual(0.99);
  });
});

describe("round trip through the core engine", () => {
  it("raw slices load through the python data module bitwise", () => {
    const src = tempDir();
    const out = tempDir();
    writeFixtureVolume(src, "subj_A.nii", (x, y, z) => 1 + x + 0.25 * y + 0.125 * z, [8, 6, 3]);
    writeFixtureVolume(src, "subj_B.nii", (x, y, z) => 3 - 0.5 * x + y - 0.1 * z, [8, 6, 3]);
    convert([join(src, "subj_A.nii"), join(src, "subj_B.nii")], {
      outRoot: out, split: "train", sliceAxis: 2,
      minForeground: 0.0, clipPercentiles: [0.0, 100.0],
    });
    const script = `
import json, sys
import numpy as np
from mambasynth.data import read_raw_tensor, load_dataset, parse_task, DatasetManifest, denormalize

root = sys.argv[1]
manifest = DatasetManifest.read(root + "/manifest.txt")
raw = read_raw_tensor(root + "/train/subj/A_0001.raw")
samples, _ = load_dataset(root, parse_task("A->B"), "train")
lo, hi = manifest.ranges["A"]
recovered = denormalize(samples[1].images["A"], lo, hi)
print(json.dumps({
    "shape": list(raw.shape),
    "dtype": str(raw.dtype),
    "raw_bytes": raw.tobytes().hex(),
    "n_samples": len(samples),
    "max_roundtrip_err": float(np.max(np.abs(recovered - raw))),
    "modalities": manifest.modalities,
}))
`;
    const result = execFileSync("python3", ["-c", script, out], { encoding: "utf-8" });
    const info = JSON.parse(result.trim());
    expect(info.n_samples).toBe(3);
    expect(info.shape).toEqual([8, 6]);
    expect(info.dtype).toBe("float32");
    expect(info.modalities).toEqual(["A", "B"]);
    // bitwise: python sees exactly the bytes the converter wrote
    const expected = extractSlice(parseNifti(readFileSync(join(src, "subj_A.nii"))), 2, 1);
    expect(info.raw_bytes).toBe(Buffer.from(expected.data.buffer).toString("hex"));
    // and the normalize/denormalize round trip stays within float32 noise
    expect(info.max_roundtrip_err).toBeLessThan(1e-5);
  });
});
