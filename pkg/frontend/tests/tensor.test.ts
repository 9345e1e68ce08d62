import { describe, expect, it } from 'vitest';

import { decodeTensor, encodeMask, fromBase64, toBase64 } from '../src/tensor.js';

describe('GSTEN tensors', () => {
  it('round-trips a mask', () => {
    const mask = new Uint8Array([1, 0, 0, 1, 1, 1]);
    const blob = encodeMask(mask, 2, 3);
    const tensor = decodeTensor(blob);
    expect(tensor.dtype).toBe('u8');
    expect(tensor.dims).toEqual([2, 3]);
    expect(Array.from(tensor.data as Uint8Array)).toEqual([1, 0, 0, 1, 1, 1]);
  });

  it('rejects bad magic', () => {
    expect(() => decodeTensor(new Uint8Array([1, 2, 3, 4, 5, 6, 7, 8]))).toThrow(/GSTEN/);
  });

  it('rejects a size mismatch when encoding', () => {
    expect(() => encodeMask(new Uint8Array(5), 2, 3)).toThrow(/mismatch/);
  });

  it('base64 helpers round-trip', () => {
    const bytes = new Uint8Array([0, 1, 2, 250, 255]);
    expect(Array.from(fromBase64(toBase64(bytes)))).toEqual([0, 1, 2, 250, 255]);
  });
});
