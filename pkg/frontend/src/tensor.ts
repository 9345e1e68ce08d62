/** Minimal reader/writer for the service's raw tensor format (GSTEN). */

const MAGIC = [0x47, 0x53, 0x54, 0x45, 0x4e]; // "GSTEN"

export interface Tensor {
  dtype: 'u8' | 'f32';
  dims: number[];
  data: Uint8Array | Float32Array;
}

export function encodeMask(mask: Uint8Array, height: number, width: number): Uint8Array {
  if (mask.length !== height * width) throw new Error('mask size mismatch');
  const header = new Uint8Array(5 + 3 + 8);
  header.set(MAGIC, 0);
  header[5] = 1; // version
  header[6] = 0; // dtype u8
  header[7] = 2; // ndim
  const view = new DataView(header.buffer);
  view.setUint32(8, height, true);
  view.setUint32(12, width, true);
  const out = new Uint8Array(header.length + mask.length);
  out.set(header, 0);
  out.set(mask, header.length);
  return out;
}

export function decodeTensor(blob: Uint8Array): Tensor {
  for (let i = 0; i < 5; i++) {
    if (blob[i] !== MAGIC[i]) throw new Error('not a GSTEN tensor');
  }
  if (blob[5] !== 1) throw new Error(`unknown GSTEN version ${blob[5]}`);
  const dtypeCode = blob[6];
  const ndim = blob[7];
  const view = new DataView(blob.buffer, blob.byteOffset);
  const dims: number[] = [];
  for (let i = 0; i < ndim; i++) dims.push(view.getUint32(8 + 4 * i, true));
  const offset = 8 + 4 * ndim;
  const count = dims.reduce((a, b) => a * b, 1);
  if (dtypeCode === 0) {
    return { dtype: 'u8', dims, data: blob.slice(offset, offset + count) };
  }
  if (dtypeCode === 1) {
    const bytes = blob.slice(offset, offset + 4 * count);
    return { dtype: 'f32', dims, data: new Float32Array(bytes.buffer, 0, count) };
  }
  throw new Error(`unknown GSTEN dtype code ${dtypeCode}`);
}

// node's Buffer when available (tests), browser atob/btoa otherwise
const nodeBuffer = (globalThis as Record<string, any>).Buffer;

export function toBase64(bytes: Uint8Array): string {
  if (nodeBuffer) return nodeBuffer.from(bytes).toString('base64');
  let binary = '';
  bytes.forEach((b) => { binary += String.fromCharCode(b); });
  return btoa(binary);
}

export function fromBase64(text: string): Uint8Array {
  if (nodeBuffer) return new Uint8Array(nodeBuffer.from(text, 'base64'));
  const binary = atob(text);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}
