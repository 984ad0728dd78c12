/**
 * Volume-to-slice conversion.
 *
 * Input volumes are NIfTI files named <subject>_<modality>.nii[.gz]; all
 * modalities of a subject must share in-plane extents (registration happens
 * upstream). Each selected slice is written as a 2-D raw tensor at
 * <out>/<split>/<subject>/<modality>_<index>.raw, and per-modality
 * percentile-clipped intensity ranges go into the dataset manifest.
 */

import { createHash } from "node:crypto";
import { readFileSync, readdirSync } from "node:fs";
import { basename, join } from "node:path";

import { NiftiVolume, parseNifti } from "./nifti.js";
import { writeManifest, writeRawTensor } from "./raw.js";

export interface ConvertOptions {
  outRoot: string;
  split: "train" | "val" | "test";
  sliceAxis: 0 | 1 | 2;
  sliceRange?: [number, number]; // half-open [lo, hi)
  minForeground: number;         // fraction of voxels above threshold
  clipPercentiles: [number, number];
}

export const DEFAULT_OPTIONS: Omit<ConvertOptions, "outRoot" | "split"> = {
  sliceAxis: 2,
  minForeground: 0.05,
  clipPercentiles: [0.5, 99.5],
};

export interface ConvertReport {
  written: number;
  skippedSlices: number;
  skippedSubjects: string[];
  errors: string[];
  ranges: Map<string, [number, number]>;
  counts: Map<string, number>;
}

interface SubjectVolumes {
  subject: string;
  volumes: Map<string, NiftiVolume>;
}

const NAME_RE = /^(?<subject>[\w-]+)_(?<modality>\w+)\.nii(\.gz)?$/;

export function groupVolumePaths(paths: string[]): Map<string, Map<string, string>> {
  const subjects = new Map<string, Map<string, string>>();
  for (const path of paths) {
    const match = NAME_RE.exec(basename(path));
    if (!match?.groups) {
      throw new Error(
        `cannot parse '${basename(path)}': expected <subject>_<modality>.nii[.gz]`
      );
    }
    const { subject, modality } = match.groups;
    if (!subjects.has(subject)) {
      subjects.set(subject, new Map());
    }
    subjects.get(subject)!.set(modality, path);
  }
  return subjects;
}

export function listVolumes(dir: string): string[] {
  return readdirSync(dir)
    .filter((name) => NAME_RE.test(name))
    .sort()
    .map((name) => join(dir, name));
}

/** Slice k along the chosen axis, emitted as volume[:, :, k]-style C-order. */
export function extractSlice(vol: NiftiVolume, axis: 0 | 1 | 2, k: number): {
  shape: [number, number];
  data: Float32Array;
} {
  const [nx, ny, nz] = vol.dims;
  const at = (x: number, y: number, z: number) => vol.data[x + nx * (y + ny * z)];
  let rows: number;
  let cols: number;
  let get: (r: number, c: number) => number;
  if (axis === 2) {
    rows = nx; cols = ny;
    get = (r, c) => at(r, c, k);
  } else if (axis === 1) {
    rows = nx; cols = nz;
    get = (r, c) => at(r, k, c);
  } else {
    rows = ny; cols = nz;
    get = (r, c) => at(k, r, c);
  }
  const out = new Float32Array(rows * cols);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      out[r * cols + c] = Math.fround(get(r, c));
    }
  }
  return { shape: [rows, cols], data: out };
}

export function foregroundFraction(slice: Float32Array, volumeMax: number): number {
  if (volumeMax <= 0) {
    return 0;
  }
  const threshold = 0.02 * volumeMax;
  let above = 0;
  for (const v of slice) {
    if (v > threshold) {
      above += 1;
    }
  }
  return above / slice.length;
}

export function percentile(sortedValues: Float64Array | Float32Array, p: number): number {
  if (sortedValues.length === 0) {
    throw new Error("percentile of empty data");
  }
  const pos = (p / 100) * (sortedValues.length - 1);
  const lo = Math.floor(pos);
  const hi = Math.ceil(pos);
  const frac = pos - lo;
  return sortedValues[lo] * (1 - frac) + sortedValues[hi] * frac;
}

export function convert(volumePaths: string[], options: ConvertOptions): ConvertReport {
  const report: ConvertReport = {
    written: 0,
    skippedSlices: 0,
    skippedSubjects: [],
    errors: [],
    ranges: new Map(),
    counts: new Map(),
  };
  const grouped = groupVolumePaths(volumePaths);
  const loaded: SubjectVolumes[] = [];
  let modalities: string[] | null = null;

  for (const [subject, paths] of [...grouped.entries()].sort()) {
    const volumes = new Map<string, NiftiVolume>();
    let failed = false;
    for (const [modality, path] of paths) {
      try {
        volumes.set(modality, parseNifti(readFileSync(path)));
      } catch (err) {
        report.errors.push(`${path}: ${(err as Error).message}`);
        failed = true;
      }
    }
    if (failed) {
      report.skippedSubjects.push(subject);
      continue;
    }
    const dims = [...volumes.values()].map((v) => v.dims.join("x"));
    if (new Set(dims).size !== 1) {
      report.errors.push(`${subject}: modality extents differ (${dims.join(" vs ")})`);
      report.skippedSubjects.push(subject);
      continue;
    }
    const mods = [...volumes.keys()].sort();
    if (modalities === null) {
      modalities = mods;
    } else if (modalities.join(",") !== mods.join(",")) {
      report.errors.push(
        `${subject}: modality set {${mods}} differs from {${modalities}}`
      );
      report.skippedSubjects.push(subject);
      continue;
    }
    loaded.push({ subject, volumes });
  }
  if (!loaded.length || modalities === null) {
    return report;
  }

  const perModalityValues = new Map<string, number[]>();
  for (const m of modalities) {
    perModalityValues.set(m, []);
  }
  const reference = modalities[0];
  let written = 0;

  for (const { subject, volumes } of loaded) {
    const ref = volumes.get(reference)!;
    const axisLen = ref.dims[options.sliceAxis];
    const [lo, hi] = options.sliceRange ?? [0, axisLen];
    const refMax = ref.data.reduce((a, b) => Math.max(a, b), -Infinity);
    let index = 0;
    for (let k = Math.max(0, lo); k < Math.min(axisLen, hi); k++) {
      const refSlice = extractSlice(ref, options.sliceAxis, k);
      if (foregroundFraction(refSlice.data, refMax) < options.minForeground) {
        report.skippedSlices += 1;
        continue;
      }
      for (const modality of modalities) {
        const slice =
          modality === reference
            ? refSlice
            : extractSlice(volumes.get(modality)!, options.sliceAxis, k);
        const name = `${modality}_${String(index).padStart(4, "0")}.raw`;
        writeRawTensor(
          join(options.outRoot, options.split, subject, name),
          slice.shape,
          slice.data
        );
        const acc = perModalityValues.get(modality)!;
        for (const v of slice.data) {
          acc.push(v);
        }
      }
      index += 1;
      written += 1;
    }
  }
  report.written = written;
  if (written === 0) {
    report.errors.push("no slices selected; manifest left untouched");
    return report;
  }
  for (const [split, count] of scanCounts(options.outRoot, modalities.length)) {
    report.counts.set(split, count);
  }

  const [pLo, pHi] = options.clipPercentiles;
  for (const modality of modalities) {
    const values = Float64Array.from(perModalityValues.get(modality)!);
    values.sort();
    if (!values.length) {
      continue;
    }
    let lo = percentile(values, pLo);
    let hi = percentile(values, pHi);
    if (hi <= lo) {
      hi = lo + 1;
    }
    report.ranges.set(modality, [lo, hi]);
  }

  writeManifest(join(options.outRoot, "manifest.txt"), {
    modalities,
    ranges: report.ranges,
    counts: report.counts,
    contentHash: hashDataset(options.outRoot),
  });
  return report;
}

const SPLITS = ["train", "val", "test"] as const;

function walkRawFiles(dir: string, rel: string, visit: (rel: string, abs: string) => void): void {
  let entries: { name: string; dir: boolean }[];
  try {
    entries = readdirSync(dir, { withFileTypes: true })
      .map((e) => ({ name: e.name, dir: e.isDirectory() }))
      .sort((a, b) => (a.name < b.name ? -1 : 1));
  } catch {
    return;
  }
  for (const entry of entries) {
    if (entry.dir) {
      walkRawFiles(join(dir, entry.name), `${rel}${entry.name}/`, visit);
    } else if (entry.name.endsWith(".raw")) {
      visit(`${rel}${entry.name}`, join(dir, entry.name));
    }
  }
}

function scanCounts(outRoot: string, modalityCount: number): Map<string, number> {
  const counts = new Map<string, number>();
  for (const split of SPLITS) {
    let files = 0;
    walkRawFiles(join(outRoot, split), `${split}/`, () => {
      files += 1;
    });
    if (files > 0) {
      counts.set(split, files / modalityCount);
    }
  }
  return counts;
}

/** sha256 over sorted relative paths + bytes, matching the core loader. */
function hashDataset(outRoot: string): string {
  const digest = createHash("sha256");
  for (const split of SPLITS) {
    walkRawFiles(join(outRoot, split), `${split}/`, (rel, abs) => {
      digest.update(rel);
      digest.update(readFileSync(abs));
    });
  }
  return digest.digest("hex");
}
