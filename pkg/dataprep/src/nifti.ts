/**
 * Minimal NIfTI-1 reader: enough to pull voxel data, spacing, and scaling
 * out of .nii / .nii.gz single-file volumes. Endianness is detected from
 * sizeof_hdr; scl_slope/scl_inter rescaling is applied when present.
 */

import { gunzipSync } from "node:zlib";

export interface NiftiVolume {
  dims: [number, number, number];
  spacing: [number, number, number];
  /** voxel data as float64, file order (x fastest: index = x + nx*(y + ny*z)) */
  data: Float64Array;
  datatypeCode: number;
}

const HEADER_SIZE = 348;

const DT_UINT8 = 2;
const DT_INT16 = 4;
const DT_INT32 = 8;
const DT_FLOAT32 = 16;
const DT_FLOAT64 = 64;
const DT_UINT16 = 512;

export class NiftiError extends Error {}

function readTyped(
  buf: Buffer,
  offset: number,
  count: number,
  code: number,
  littleEndian: boolean
): Float64Array {
  const out = new Float64Array(count);
  const view = new DataView(buf.buffer, buf.byteOffset + offset);
  for (let i = 0; i < count; i++) {
    switch (code) {
      case DT_UINT8:
        out[i] = view.getUint8(i);
        break;
      case DT_INT16:
        out[i] = view.getInt16(i * 2, littleEndian);
        break;
      case DT_INT32:
        out[i] = view.getInt32(i * 4, littleEndian);
        break;
      case DT_FLOAT32:
        out[i] = view.getFloat32(i * 4, littleEndian);
        break;
      case DT_FLOAT64:
        out[i] = view.getFloat64(i * 8, littleEndian);
        break;
      case DT_UINT16:
        out[i] = view.getUint16(i * 2, littleEndian);
        break;
      default:
        throw new NiftiError(`unsupported NIfTI datatype code ${code}`);
    }
  }
  return out;
}

function itemSize(code: number): number {
  switch (code) {
    case DT_UINT8:
      return 1;
    case DT_INT16:
    case DT_UINT16:
      return 2;
    case DT_INT32:
    case DT_FLOAT32:
      return 4;
    case DT_FLOAT64:
      return 8;
    default:
      throw new NiftiError(`unsupported NIfTI datatype code ${code}`);
  }
}

export function parseNifti(raw: Buffer): NiftiVolume {
  let buf = raw;
  if (buf.length >= 2 && buf[0] === 0x1f && buf[1] === 0x8b) {
    buf = gunzipSync(buf);
  }
  if (buf.length < HEADER_SIZE) {
    throw new NiftiError(`file too small for a NIfTI-1 header (${buf.length} bytes)`);
  }
  let littleEndian = true;
  let sizeofHdr = buf.readInt32LE(0);
  if (sizeofHdr !== HEADER_SIZE) {
    sizeofHdr = buf.readInt32BE(0);
    littleEndian = false;
  }
  if (sizeofHdr !== HEADER_SIZE) {
    throw new NiftiError("not a NIfTI-1 file: sizeof_hdr != 348 in either byte order");
  }
  const magic = buf.toString("ascii", 344, 347);
  if (magic !== "n+1" && magic !== "ni1") {
    throw new NiftiError(`bad NIfTI magic '${magic}'`);
  }
  const i16 = (off: number) => (littleEndian ? buf.readInt16LE(off) : buf.readInt16BE(off));
  const f32 = (off: number) => (littleEndian ? buf.readFloatLE(off) : buf.readFloatBE(off));

  const ndim = i16(40);
  if (ndim < 3) {
    throw new NiftiError(`need a 3-D volume, header declares ${ndim} dims`);
  }
  const nx = i16(42);
  const ny = i16(44);
  const nz = i16(46);
  for (let d = 4; d <= ndim; d++) {
    const extent = i16(40 + 2 * d);
    if (extent > 1) {
      throw new NiftiError(`4-D+ volumes are not supported (dim[${d}] = ${extent})`);
    }
  }
  const datatypeCode = i16(70);
  const voxOffset = Math.trunc(f32(108));
  const sclSlope = f32(112);
  const sclInter = f32(116);
  const spacing: [number, number, number] = [f32(80), f32(84), f32(88)];

  const count = nx * ny * nz;
  const needed = voxOffset + count * itemSize(datatypeCode);
  if (buf.length < needed) {
    throw new NiftiError(`payload truncated: need ${needed} bytes, have ${buf.length}`);
  }
  const data = readTyped(buf, voxOffset, count, datatypeCode, littleEndian);
  if (sclSlope !== 0 && !(sclSlope === 1 && sclInter === 0)) {
    for (let i = 0; i < count; i++) {
      data[i] = data[i] * sclSlope + sclInter;
    }
  }
  for (let i = 0; i < count; i++) {
    if (!Number.isFinite(data[i])) {
      throw new NiftiError(`non-finite voxel at linear index ${i}`);
    }
  }
  return { dims: [nx, ny, nz], spacing, data, datatypeCode };
}
