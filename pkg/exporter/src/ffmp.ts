/**
 * FFMP tensor container: little-endian, magic "FFMP", u32 version = 1,
 * u32 count, then per tensor: u16 name length, UTF-8 name, u8 ndim,
 * u32 dims..., float32 payload in row-major order.
 */

export interface NamedTensor {
  name: string;
  dims: number[];
  data: Float32Array;
}

const MAGIC = Buffer.from("FFMP", "ascii");
const VERSION = 1;

export function writeContainer(tensors: NamedTensor[]): Buffer {
  const parts: Buffer[] = [];
  const header = Buffer.alloc(12);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(VERSION, 4);
  header.writeUInt32LE(tensors.length, 8);
  parts.push(header);

  for (const t of tensors) {
    const numel = t.dims.reduce((a, b) => a * b, 1);
    if (numel !== t.data.length) {
      throw new Error(`tensor ${t.name}: dims ${t.dims} do not match data length ${t.data.length}`);
    }
    const name = Buffer.from(t.name, "utf-8");
    const meta = Buffer.alloc(2 + name.length + 1 + 4 * t.dims.length);
    meta.writeUInt16LE(name.length, 0);
    name.copy(meta, 2);
    meta.writeUInt8(t.dims.length, 2 + name.length);
    t.dims.forEach((d, i) => meta.writeUInt32LE(d, 2 + name.length + 1 + 4 * i));
    parts.push(meta);
    const payload = Buffer.alloc(4 * numel);
    for (let i = 0; i < numel; i++) payload.writeFloatLE(t.data[i], 4 * i);
    parts.push(payload);
  }
  return Buffer.concat(parts);
}

export function readContainer(buf: Buffer): NamedTensor[] {
  if (buf.length < 12) throw new Error("truncated container header");
  if (!buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error(`bad magic ${buf.subarray(0, 4).toString()}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  const count = buf.readUInt32LE(8);
  let off = 12;
  const out: NamedTensor[] = [];
  for (let k = 0; k < count; k++) {
    const nameLen = buf.readUInt16LE(off);
    off += 2;
    const name = buf.subarray(off, off + nameLen).toString("utf-8");
    off += nameLen;
    const ndim = buf.readUInt8(off);
    off += 1;
    const dims: number[] = [];
    for (let i = 0; i < ndim; i++) {
      dims.push(buf.readUInt32LE(off));
      off += 4;
    }
    const numel = dims.reduce((a, b) => a * b, 1);
    if (off + 4 * numel > buf.length) throw new Error(`truncated tensor ${name}`);
    const data = new Float32Array(numel);
    for (let i = 0; i < numel; i++) data[i] = buf.readFloatLE(off + 4 * i);
    off += 4 * numel;
    out.push({ name, dims, data });
  }
  return out;
}
