/** Viewer orchestration: one state object, one server action per user action.
 *
 * The session owns the orbit camera, the last overlay, the tracked-click
 * list, and the running selection count. Segmentation follows a last-action-
 * wins rule: a new click or prompt aborts the in-flight request and the
 * stale response never touches the state. Every mutation here is driven by a
 * server response — the client renders what the server said, nothing more.
 */

import { ApiError, SanfClient, objTriangleCount } from "./api.js";
import type { SegmentResponse, SessionInfo, TrackedClickView } from "./api.js";
import { clampElevation, orbitToPose } from "./orbit.js";
import type { OrbitParams, WirePose } from "./orbit.js";
import { decodeRle } from "./rle.js";
import type { RleMask } from "./rle.js";

export const DEFAULT_FOV_Y = 45.0;

export interface MaskState {
  rle: RleMask;
  bitmap: Uint8Array;
  /** click position for the dot overlay; absent for prompt masks */
  clickU?: number;
  clickV?: number;
}

export interface ViewerState {
  orbit: OrbitParams;
  pose: WirePose;
  width: number;
  height: number;
  mode: "click" | "prompt";
  lastImage: ArrayBuffer | null;
  lastMask: MaskState | null;
  trackedClicks: TrackedClickView[];
  selectionCount: number;
  /** user-facing message from the last failed action, e.g. the prompt list */
  lastError: string | null;
}

export class ViewerSession {
  readonly client: SanfClient;
  readonly info: SessionInfo;
  readonly state: ViewerState;
  private inflight: AbortController | null = null;

  constructor(client: SanfClient, info: SessionInfo, width?: number, height?: number) {
    this.client = client;
    this.info = info;
    const w = width ?? info.imageWidth;
    const h = height ?? info.imageHeight;
    const orbit: OrbitParams = { azimuth: 30, elevation: 20, radius: 2.6, target: [0, 0, 0] };
    this.state = {
      orbit,
      pose: orbitToPose(orbit, DEFAULT_FOV_Y, w, h),
      width: w,
      height: h,
      mode: info.teacherKind === "multi" ? "prompt" : "click",
      lastImage: null,
      lastMask: null,
      trackedClicks: [],
      selectionCount: 0,
      lastError: null,
    };
  }

  /** Move the camera: new pose, fresh render, and re-request tracked clicks.
   * The old overlay belongs to the old view, so it is dropped. */
  async orbit(params: Partial<OrbitParams>): Promise<void> {
    const merged: OrbitParams = {
      ...this.state.orbit,
      ...params,
      target: params.target ?? this.state.orbit.target,
    };
    merged.elevation = clampElevation(merged.elevation);
    this.state.orbit = merged;
    this.state.pose = orbitToPose(merged, DEFAULT_FOV_Y, this.state.width, this.state.height);
    this.state.lastMask = null;
    await this.render();
    if (this.info.meshAttached) {
      await this.refreshClicks();
    }
  }

  async render(): Promise<ArrayBuffer> {
    const png = await this.client.render(this.state.pose, this.state.width, this.state.height);
    this.state.lastImage = png;
    return png;
  }

  private async segment(run: (signal: AbortSignal) => Promise<SegmentResponse>): Promise<SegmentResponse | null> {
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    try {
      const response = await run(controller.signal);
      if (this.inflight !== controller) return null; // a newer action won
      this.state.lastError = null;
      return response;
    } catch (err) {
      if (controller.signal.aborted && this.inflight !== controller) {
        return null; // cancelled by a newer action: stale failure, ignore
      }
      throw err;
    } finally {
      if (this.inflight === controller) this.inflight = null;
    }
  }

  /** Click segmentation; resolves null when a newer action superseded it. */
  async click(u: number, v: number): Promise<MaskState | null> {
    if (this.state.mode !== "click") {
      throw new Error("session: this service decodes prompts; use prompt()");
    }
    let response: SegmentResponse | null;
    try {
      response = await this.segment((signal) => this.client.segmentClick(this.state.pose, u, v, signal));
    } catch (err) {
      this.state.lastError = err instanceof ApiError ? err.detail : String(err);
      throw err;
    }
    if (response === null) return null;
    const mask: MaskState = {
      rle: response.maskRle,
      bitmap: decodeRle(response.maskRle),
      clickU: u,
      clickV: v,
    };
    this.state.lastMask = mask;
    return mask;
  }

  /** Prompt segmentation; an unknown prompt surfaces the server's list. */
  async prompt(text: string): Promise<MaskState | null> {
    if (this.state.mode !== "prompt") {
      throw new Error("session: this service decodes clicks; use click()");
    }
    let response: SegmentResponse | null;
    try {
      response = await this.segment((signal) => this.client.segmentPrompt(this.state.pose, text, signal));
    } catch (err) {
      if (err instanceof ApiError && err.code === "unknownPrompt") {
        const known = err.knownPrompts ?? [];
        this.state.lastError = `unknown prompt "${text}" — known: ${known.join(", ")}`;
      } else {
        this.state.lastError = err instanceof ApiError ? err.detail : String(err);
      }
      throw err;
    }
    if (response === null) return null;
    const mask: MaskState = { rle: response.maskRle, bitmap: decodeRle(response.maskRle) };
    this.state.lastMask = mask;
    return mask;
  }

  /** Project the current overlay onto the mesh; count only ever grows. */
  async project(): Promise<number> {
    if (this.state.lastMask === null) {
      throw new Error("session: segment a view before projecting");
    }
    const { selectedTriangleCount } = await this.client.project(this.state.pose, this.state.lastMask.rle);
    if (selectedTriangleCount < this.state.selectionCount) {
      throw new Error(
        `session: selection count fell from ${this.state.selectionCount} to ${selectedTriangleCount}`,
      );
    }
    this.state.selectionCount = selectedTriangleCount;
    return selectedTriangleCount;
  }

  /** Anchor a marker on the surface under the pixel, then refresh markers. */
  async trackClick(u: number, v: number): Promise<number> {
    const { clickId } = await this.client.addClick(this.state.pose, u, v);
    await this.refreshClicks();
    return clickId;
  }

  async refreshClicks(): Promise<TrackedClickView[]> {
    const { clicks } = await this.client.clicks(this.state.pose);
    this.state.trackedClicks = clicks;
    return clicks;
  }

  /** The selected sub-mesh as OBJ text; its `f` lines match selectionCount. */
  async exportSelected(): Promise<string> {
    try {
      return await this.client.meshSelected();
    } catch (err) {
      if (err instanceof ApiError && err.code === "emptySelection") {
        this.state.lastError = "nothing selected yet — project a mask from more views first";
      }
      throw err;
    }
  }

  async resetSelection(): Promise<void> {
    const { selectedTriangleCount } = await this.client.resetSelection();
    this.state.selectionCount = selectedTriangleCount;
    this.state.trackedClicks = [];
  }
}

export interface ScriptedViewReport {
  azimuth: number;
  segmentMs: number;
  maskPixels: number;
  selectionCount: number;
}

export interface ScriptedSessionReport {
  views: ScriptedViewReport[];
  finalSelectionCount: number;
  objTriangles: number;
  maxSegmentMs: number;
}

/** The full interaction loop, scripted: orbit to three views, segment each,
 * composite the overlay data, project it, then export the selection and
 * check the OBJ against the reported count. Used by the integration test
 * and runnable from the browser console. */
export async function runScriptedSession(
  client: SanfClient,
  options: { width?: number; height?: number; azimuths?: number[] } = {},
): Promise<ScriptedSessionReport> {
  const info = await client.session();
  if (!info.meshAttached) {
    throw new Error("scripted session needs a mesh attached to the service");
  }
  const session = new ViewerSession(client, info, options.width, options.height);
  await session.resetSelection();
  const views: ScriptedViewReport[] = [];
  let maxSegmentMs = 0;

  // candidate click spots, as image fractions: a user clicks whatever object
  // is visible, so probe a few positions and keep the first mask that looks
  // like an object — substantial, but not washing over the image border the
  // way a background click does
  const spots: [number, number][] = [[0.5, 0.5], [0.38, 0.45], [0.62, 0.55], [0.3, 0.62], [0.7, 0.38]];

  for (const azimuth of options.azimuths ?? [20, 140, 260]) {
    await session.orbit({ azimuth, elevation: 18 });
    const width = session.state.width;
    const height = session.state.height;
    const area = width * height;

    let mask = null;
    let segmentMs = 0;
    if (session.state.mode === "click") {
      let fallback: MaskState | null = null;
      for (const [fu, fv] of spots) {
        let candidate: MaskState | null;
        const t0 = Date.now();
        try {
          candidate = await session.click(fu * (width - 1), fv * (height - 1));
        } catch (err) {
          if (err instanceof ApiError) continue; // e.g. a miss; try the next spot
          throw err;
        } finally {
          segmentMs = Date.now() - t0;
          maxSegmentMs = Math.max(maxSegmentMs, segmentMs);
        }
        if (candidate === null) continue;
        fallback = candidate; // tracks state.lastMask, which project() uses
        let pixels = 0;
        for (const bit of candidate.bitmap) pixels += bit;
        let borderSet = 0;
        for (let x = 0; x < width; x++) {
          borderSet += (candidate.bitmap[x] ?? 0) + (candidate.bitmap[(height - 1) * width + x] ?? 0);
        }
        for (let y = 0; y < height; y++) {
          borderSet += (candidate.bitmap[y * width] ?? 0) + (candidate.bitmap[y * width + width - 1] ?? 0);
        }
        const borderFraction = borderSet / (2 * width + 2 * height);
        if (pixels >= area / 100 && borderFraction <= 0.5) {
          mask = candidate;
          break;
        }
      }
      mask = mask ?? fallback;
    } else {
      const t0 = Date.now();
      mask = await session.prompt(info.promptVocabulary[0] ?? "");
      segmentMs = Date.now() - t0;
      maxSegmentMs = Math.max(maxSegmentMs, segmentMs);
    }
    if (mask === null) {
      throw new Error("scripted session: segmentation was cancelled unexpectedly");
    }

    let maskPixels = 0;
    for (const bit of mask.bitmap) maskPixels += bit;
    const selectionCount = await session.project();
    views.push({ azimuth, segmentMs, maskPixels, selectionCount });
  }

  const objText = await session.exportSelected();
  return {
    views,
    finalSelectionCount: session.state.selectionCount,
    objTriangles: objTriangleCount(objText),
    maxSegmentMs,
  };
}
