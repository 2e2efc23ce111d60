/** Typed HTTP client for the segmentation service.
 *
 * Every request and response shape here mirrors docs/api.md; the client adds
 * nothing beyond serialization, the error envelope, and abort support. The
 * server URL is supplied at construction so the page can be served from
 * anywhere.
 */

import type { RleMask } from "./rle.js";
import type { WirePose } from "./orbit.js";

export interface SessionInfo {
  snapshotId: string;
  teacherKind: "single" | "multi";
  promptVocabulary: string[];
  meshAttached: boolean;
  teacherEncodeCalls: number;
  imageWidth: number;
  imageHeight: number;
  sceneBounds: { lo: [number, number, number]; hi: [number, number, number] };
}

export interface LogitsStats {
  min: number;
  max: number;
  mean: number;
  positiveFraction: number;
}

export interface SegmentResponse {
  maskRle: RleMask;
  logitsStats: LogitsStats;
  featureRenderMs: number;
  decodeMs: number;
}

export interface TrackedClickView {
  clickId: number;
  u: number;
  v: number;
  status: "visible" | "occluded" | "off-screen";
  worldPoint: [number, number, number];
}

/** Server-reported failure, decoded from the JSON error envelope. */
export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly detail: string;
  readonly extra: Record<string, unknown>;

  constructor(status: number, code: string, detail: string, extra: Record<string, unknown> = {}) {
    super(`${code}: ${detail}`);
    this.name = "ApiError";
    this.status = status;
    this.code = code;
    this.detail = detail;
    this.extra = extra;
  }

  /** Valid prompt strings, present on `unknownPrompt` responses. */
  get knownPrompts(): string[] | null {
    const known = this.extra["known"];
    return Array.isArray(known) ? known.map(String) : null;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function envelope(response: Response): Promise<never> {
  let code = "internal";
  let detail = `HTTP ${response.status}`;
  let extra: Record<string, unknown> = {};
  try {
    const body = (await response.json()) as Record<string, unknown>;
    if (typeof body["error"] === "string") code = body["error"];
    if (typeof body["detail"] === "string") detail = body["detail"];
    extra = Object.fromEntries(
      Object.entries(body).filter(([k]) => k !== "error" && k !== "detail"),
    );
  } catch {
    // non-JSON error body: keep the HTTP-level description
  }
  throw new ApiError(response.status, code, detail, extra);
}

export class SanfClient {
  readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async requestJson<T>(
    method: string,
    path: string,
    body?: unknown,
    signal?: AbortSignal,
  ): Promise<T> {
    const init: RequestInit = { method, signal: signal ?? null };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) await envelope(response);
    return (await response.json()) as T;
  }

  session(): Promise<SessionInfo> {
    return this.requestJson<SessionInfo>("GET", "/session");
  }

  /** PNG bytes rendered at the explicit size (the pose's own size is ignored). */
  async render(
    pose: WirePose,
    width: number,
    height: number,
    signal?: AbortSignal,
  ): Promise<ArrayBuffer> {
    const response = await this.fetchImpl(this.baseUrl + "/render", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ pose, width, height }),
      signal: signal ?? null,
    });
    if (!response.ok) await envelope(response);
    return response.arrayBuffer();
  }

  segmentClick(pose: WirePose, u: number, v: number, signal?: AbortSignal): Promise<SegmentResponse> {
    return this.requestJson<SegmentResponse>("POST", "/segment/click", { pose, u, v }, signal);
  }

  segmentPrompt(pose: WirePose, prompt: string, signal?: AbortSignal): Promise<SegmentResponse> {
    return this.requestJson<SegmentResponse>("POST", "/segment/prompt", { pose, prompt }, signal);
  }

  project(pose: WirePose, maskRle: RleMask): Promise<{ selectedTriangleCount: number }> {
    return this.requestJson("POST", "/project", { pose, maskRle });
  }

  addClick(pose: WirePose, u: number, v: number): Promise<{ clickId: number; worldPoint: [number, number, number] }> {
    return this.requestJson("POST", "/clicks", { pose, u, v });
  }

  clicks(pose: WirePose): Promise<{ clicks: TrackedClickView[] }> {
    const encoded = encodeURIComponent(JSON.stringify(pose));
    return this.requestJson("GET", `/clicks?pose=${encoded}`);
  }

  resetSelection(): Promise<{ selectedTriangleCount: number; clickCount: number }> {
    return this.requestJson("POST", "/selection/reset");
  }

  /** The selected sub-mesh as Wavefront OBJ text. */
  async meshSelected(): Promise<string> {
    const response = await this.fetchImpl(this.baseUrl + "/mesh/selected", { method: "GET" });
    if (!response.ok) await envelope(response);
    return response.text();
  }
}

/** Count `f` lines in OBJ text (the export's triangle count). */
export function objTriangleCount(objText: string): number {
  let count = 0;
  for (const line of objText.split("\n")) {
    if (line.startsWith("f ")) count += 1;
  }
  return count;
}
