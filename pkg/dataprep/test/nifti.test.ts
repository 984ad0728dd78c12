import { describe, expect, it } from "vitest";

import { NiftiError, parseNifti } from "../src/nifti.js";
import { buildNifti } from "./fixtures.js";

describe("parseNifti", () => {
  it("reads a float32 volume in file order", () => {
    const vol = parseNifti(
      buildNifti({ dims: [3, 4, 5], value: (x, y, z) => x + 10 * y + 100 * z })
    );
    expect(vol.dims).toEqual([3, 4, 5]);
    // file order: x fastest
    expect(vol.data[0]).toBe(0);
    expect(vol.data[1]).toBe(1);
    expect(vol.data[3]).toBe(10);
    expect(vol.data[3 * 4]).toBe(100);
    expect(vol.data[2 + 3 * (3 + 4 * 4)]).toBe(2 + 30 + 400);
  });

  it("applies scl_slope and scl_inter", () => {
    const vol = parseNifti(
      buildNifti({ dims: [2, 2, 2], datatypeCode: 4, sclSlope: 0.5, sclInter: 10, value: (x) => x })
    );
    expect(vol.data[0]).toBe(10);
    expect(vol.data[1]).toBe(10.5);
  });

  it("reads big-endian files", () => {
    const vol = parseNifti(
      buildNifti({ dims: [2, 3, 2], bigEndian: true, value: (x, y, z) => x - y + 2 * z })
    );
    expect(vol.data[1 + 2 * (2 + 3 * 1)]).toBe(1 - 2 + 2);
  });

  it("decompresses gzip", () => {
    const vol = parseNifti(buildNifti({ dims: [2, 2, 2], gzip: true, value: (x, y, z) => x * y * z }));
    expect(vol.data[7]).toBe(1);
  });

  it("reads integer datatypes", () => {
    for (const code of [2, 4, 8, 512]) {
      const vol = parseNifti(
        buildNifti({ dims: [2, 2, 2], datatypeCode: code, value: (x, y, z) => x + y + z })
      );
      expect(vol.data[7]).toBe(3);
    }
  });

  it("rejects non-nifti buffers", () => {
    expect(() => parseNifti(Buffer.alloc(400))).toThrow(NiftiError);
  });

  it("rejects truncated payloads", () => {
    const full = buildNifti({ dims: [4, 4, 4], value: () => 1 });
    expect(() => parseNifti(full.subarray(0, full.length - 16))).toThrow(/truncated/);
  });
});
