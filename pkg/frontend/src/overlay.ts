/** Overlay compositing on raw RGBA pixel buffers.
 *
 * Pure byte math so the same code runs under a canvas 2D context in the
 * browser and against plain arrays in tests: a translucent red wash over
 * masked pixels, a solid green dot at the click, and green markers for
 * tracked clicks that the server reports as visible.
 */

import type { TrackedClickView } from "./api.js";

export const MASK_ALPHA = 0.45;
export const MASK_COLOR: [number, number, number] = [255, 0, 0];
export const DOT_RADIUS = 4;
export const DOT_COLOR: [number, number, number] = [0, 255, 0];

/** Blend the mask color over every set pixel, in place. */
export function compositeMask(
  rgba: Uint8ClampedArray,
  width: number,
  height: number,
  mask: ArrayLike<number>,
): void {
  const area = width * height;
  if (rgba.length !== area * 4) {
    throw new Error(`overlay: rgba has ${rgba.length} bytes, expected ${area * 4}`);
  }
  if (mask.length !== area) {
    throw new Error(`overlay: mask has ${mask.length} entries, expected ${area}`);
  }
  const keep = 1 - MASK_ALPHA;
  for (let i = 0; i < area; i++) {
    if (!mask[i]) continue;
    const o = i * 4;
    rgba[o] = Math.round(keep * (rgba[o] ?? 0) + MASK_ALPHA * MASK_COLOR[0]);
    rgba[o + 1] = Math.round(keep * (rgba[o + 1] ?? 0) + MASK_ALPHA * MASK_COLOR[1]);
    rgba[o + 2] = Math.round(keep * (rgba[o + 2] ?? 0) + MASK_ALPHA * MASK_COLOR[2]);
  }
}

/** Solid filled disc, clipped to the image. */
export function drawDot(
  rgba: Uint8ClampedArray,
  width: number,
  height: number,
  u: number,
  v: number,
  radius: number = DOT_RADIUS,
  color: [number, number, number] = DOT_COLOR,
): void {
  const cu = Math.round(u);
  const cv = Math.round(v);
  for (let dy = -radius; dy <= radius; dy++) {
    for (let dx = -radius; dx <= radius; dx++) {
      if (dx * dx + dy * dy > radius * radius) continue;
      const px = cu + dx;
      const py = cv + dy;
      if (px < 0 || px >= width || py < 0 || py >= height) continue;
      const o = (py * width + px) * 4;
      rgba[o] = color[0];
      rgba[o + 1] = color[1];
      rgba[o + 2] = color[2];
      rgba[o + 3] = 255;
    }
  }
}

/** Markers for server-tracked clicks; occluded and off-screen ones stay hidden. */
export function drawMarkers(
  rgba: Uint8ClampedArray,
  width: number,
  height: number,
  clicks: readonly TrackedClickView[],
): void {
  for (const click of clicks) {
    if (click.status !== "visible") continue;
    drawDot(rgba, width, height, click.u, click.v);
  }
}
