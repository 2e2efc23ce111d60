/** Run-length mask codec — the wire format shared with the server.
 *
 * Masks are run-length encodings of the row-major flattened bitmap:
 * `startsWith` is the value of pixel (0, 0), `runs` are strictly positive
 * lengths of alternating values (continuing across row boundaries), and the
 * run lengths sum to `width * height`. The encoding is canonical — adjacent
 * runs always differ — so equal bitmaps produce identical JSON.
 */

export interface RleMask {
  width: number;
  height: number;
  startsWith: 0 | 1;
  runs: number[];
}

/** Decode to a flat row-major bitmap of 0/1 bytes. Throws on malformed input. */
export function decodeRle(mask: RleMask): Uint8Array {
  const { width, height, startsWith, runs } = mask;
  if (!Number.isInteger(width) || !Number.isInteger(height) || width < 0 || height < 0) {
    throw new Error(`rle: bad dimensions ${width}x${height}`);
  }
  if (startsWith !== 0 && startsWith !== 1) {
    throw new Error(`rle: startsWith must be 0 or 1, got ${String(startsWith)}`);
  }
  const area = width * height;
  let total = 0;
  for (const r of runs) {
    if (!Number.isInteger(r) || r <= 0) {
      throw new Error(`rle: run lengths must be positive integers, got ${r}`);
    }
    total += r;
  }
  if (total !== area) {
    throw new Error(`rle: runs sum to ${total}, expected ${area}`);
  }
  const out = new Uint8Array(area);
  let value = startsWith;
  let at = 0;
  for (const r of runs) {
    if (value === 1) out.fill(1, at, at + r);
    at += r;
    value = value === 1 ? 0 : 1;
  }
  return out;
}

/** Encode a flat row-major bitmap (any truthy value counts as set). */
export function encodeRle(bitmap: ArrayLike<number | boolean>, width: number, height: number): RleMask {
  const area = width * height;
  if (bitmap.length !== area) {
    throw new Error(`rle: bitmap has ${bitmap.length} entries, expected ${area}`);
  }
  if (area === 0) {
    return { width, height, startsWith: 0, runs: [] };
  }
  const startsWith: 0 | 1 = bitmap[0] ? 1 : 0;
  const runs: number[] = [];
  let current = startsWith;
  let length = 0;
  for (let i = 0; i < area; i++) {
    const bit = bitmap[i] ? 1 : 0;
    if (bit === current) {
      length += 1;
    } else {
      runs.push(length);
      current = bit;
      length = 1;
    }
  }
  runs.push(length);
  return { width, height, startsWith, runs };
}

/** Count of set pixels without materialising the bitmap. */
export function countSet(mask: RleMask): number {
  let value = mask.startsWith;
  let set = 0;
  for (const r of mask.runs) {
    if (value === 1) set += r;
    value = value === 1 ? 0 : 1;
  }
  return set;
}
