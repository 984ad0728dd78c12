/** Synthetic NIfTI-1 fixtures built in memory for the tests. */

import { gzipSync } from "node:zlib";

export interface FixtureSpec {
  dims: [number, number, number];
  datatypeCode?: number;
  sclSlope?: number;
  sclInter?: number;
  bigEndian?: boolean;
  gzip?: boolean;
  /** voxel value generator in file order (x fastest) */
  value: (x: number, y: number, z: number) => number;
}

export function buildNifti(spec: FixtureSpec): Buffer {
  const [nx, ny, nz] = spec.dims;
  const code = spec.datatypeCode ?? 16; // float32
  const itemSizes: Record<number, number> = { 2: 1, 4: 2, 8: 4, 16: 4, 64: 8, 512: 2 };
  const bitpix = itemSizes[code] * 8;
  const voxOffset = 352;
  const count = nx * ny * nz;
  const buf = Buffer.alloc(voxOffset + count * itemSizes[code]);
  const le = !spec.bigEndian;

  const wi32 = (v: number, off: number) => (le ? buf.writeInt32LE(v, off) : buf.writeInt32BE(v, off));
  const wi16 = (v: number, off: number) => (le ? buf.writeInt16LE(v, off) : buf.writeInt16BE(v, off));
  const wf32 = (v: number, off: number) => (le ? buf.writeFloatLE(v, off) : buf.writeFloatBE(v, off));

  wi32(348, 0);                 // sizeof_hdr
  wi16(3, 40);                  // dim[0] = ndim
  wi16(nx, 42);
  wi16(ny, 44);
  wi16(nz, 46);
  for (let d = 4; d <= 7; d++) {
    wi16(1, 40 + 2 * d);
  }
  wi16(code, 70);               // datatype
  wi16(bitpix, 72);
  for (let d = 0; d < 8; d++) {
    wf32(1.0, 76 + 4 * d);      // pixdim
  }
  wf32(voxOffset, 108);
  wf32(spec.sclSlope ?? 0, 112);
  wf32(spec.sclInter ?? 0, 116);
  buf.write("n+1\0", 344, "ascii");

  let i = 0;
  for (let z = 0; z < nz; z++) {
    for (let y = 0; y < ny; y++) {
      for (let x = 0; x < nx; x++) {
        const v = spec.value(x, y, z);
        const off = voxOffset + i * itemSizes[code];
        switch (code) {
          case 2: buf.writeUInt8(v, off); break;
          case 4: le ? buf.writeInt16LE(v, off) : buf.writeInt16BE(v, off); break;
          case 8: le ? buf.writeInt32LE(v, off) : buf.writeInt32BE(v, off); break;
          case 16: wf32(v, off); break;
          case 64: le ? buf.writeDoubleLE(v, off) : buf.writeDoubleBE(v, off); break;
          case 512: le ? buf.writeUInt16LE(v, off) : buf.writeUInt16BE(v, off); break;
        }
        i += 1;
      }
    }
  }
  return spec.gzip ? gzipSync(buf) : buf;
}
