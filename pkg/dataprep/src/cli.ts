/**
 * Command line: convert NIfTI volumes into the core engine's slice layout.
 *
 *   mambasynth-dataprep --out <root> --split train [options] vol1.nii vol2.nii.gz ...
 *   mambasynth-dataprep --out <root> --split train --input-dir <dir> [options]
 *
 * Volumes are named <subject>_<modality>.nii[.gz].
 */

import { parseArgs } from "node:util";

import { convert, DEFAULT_OPTIONS, listVolumes, ConvertOptions } from "./convert.js";

export function main(argv: string[]): number {
  const { values, positionals } = parseArgs({
    args: argv,
    allowPositionals: true,
    options: {
      out: { type: "string" },
      split: { type: "string", default: "train" },
      "input-dir": { type: "string" },
      axis: { type: "string", default: "2" },
      range: { type: "string" },
      "min-foreground": { type: "string", default: String(DEFAULT_OPTIONS.minForeground) },
      "clip-lo": { type: "string", default: String(DEFAULT_OPTIONS.clipPercentiles[0]) },
      "clip-hi": { type: "string", default: String(DEFAULT_OPTIONS.clipPercentiles[1]) },
      help: { type: "boolean", default: false },
    },
  });
  if (values.help) {
    console.log(
      "usage: mambasynth-dataprep --out ROOT --split train|val|test " +
        "[--input-dir DIR | volumes...] [--axis 0|1|2] [--range lo:hi] " +
        "[--min-foreground F] [--clip-lo P] [--clip-hi P]"
    );
    return 0;
  }
  if (!values.out) {
    console.error("error: --out is required");
    return 2;
  }
  const split = values.split as ConvertOptions["split"];
  if (!["train", "val", "test"].includes(split)) {
    console.error(`error: bad split '${values.split}'`);
    return 2;
  }
  const axis = Number(values.axis);
  if (![0, 1, 2].includes(axis)) {
    console.error(`error: bad slice axis '${values.axis}'`);
    return 2;
  }
  let sliceRange: [number, number] | undefined;
  if (values.range) {
    const match = /^(\d+):(\d+)$/.exec(values.range);
    if (!match) {
      console.error(`error: bad --range '${values.range}', expected lo:hi`);
      return 2;
    }
    sliceRange = [Number(match[1]), Number(match[2])];
  }
  let volumes = positionals;
  if (values["input-dir"]) {
    volumes = volumes.concat(listVolumes(values["input-dir"]));
  }
  if (!volumes.length) {
    console.error("error: no input volumes given");
    return 2;
  }

  try {
    const report = convert(volumes, {
      outRoot: values.out,
      split,
      sliceAxis: axis as 0 | 1 | 2,
      sliceRange,
      minForeground: Number(values["min-foreground"]),
      clipPercentiles: [Number(values["clip-lo"]), Number(values["clip-hi"])],
    });
    for (const err of report.errors) {
      console.error(`warning: ${err}`);
    }
    if (report.skippedSubjects.length) {
      console.error(`skipped subjects: ${report.skippedSubjects.join(", ")}`);
    }
    console.log(
      `wrote ${report.written} slice set(s) to ${values.out}/${split} ` +
        `(${report.skippedSlices} below foreground threshold)`
    );
    if (report.written === 0) {
      console.error("warning: no slices written");
    }
    return report.errors.length && report.written === 0 ? 1 : 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
