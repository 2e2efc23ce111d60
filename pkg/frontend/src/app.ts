/**
 * Browser wiring: canvas viewport, drag-to-orbit, click-to-segment,
 * prompt entry, selection projection and mesh export controls.
 *
 * The module is DOM-only glue; everything testable lives in the pure
 * modules (rle, orbit, overlay, api, session).
 */

import { SanfClient, ApiError } from "./api.js";
import { ViewerSession } from "./session.js";
import { compositeMask, drawDot, drawMarkers } from "./overlay.js";

const ORBIT_SPEED = 0.4; // degrees per pixel dragged

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

function serverUrl(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("server");
  if (fromQuery !== null && fromQuery !== "") return fromQuery;
  return `${window.location.protocol}//${window.location.host}`;
}

export async function start(): Promise<void> {
  const canvas = el<HTMLCanvasElement>("viewport");
  const status = el<HTMLElement>("status");
  const promptRow = el<HTMLElement>("prompt-row");
  const promptInput = el<HTMLInputElement>("prompt-input");
  const promptButton = el<HTMLButtonElement>("prompt-go");
  const projectButton = el<HTMLButtonElement>("project");
  const exportButton = el<HTMLButtonElement>("export");
  const resetButton = el<HTMLButtonElement>("reset");
  const selectionLabel = el<HTMLElement>("selection-count");

  const ctx = canvas.getContext("2d");
  if (ctx === null) throw new Error("2d canvas context unavailable");

  const client = new SanfClient(serverUrl());
  const info = await client.session();
  const session = new ViewerSession(client, info);

  const setStatus = (text: string): void => {
    status.textContent = text;
  };

  // the server sends PNG frames; decode each new one once, then composite
  // mask + markers over a copy of the decoded pixels on every redraw
  let decodedFor: ArrayBuffer | null = null;
  let decoded: ImageData | null = null;

  const redraw = async (): Promise<void> => {
    const state = session.state;
    if (state.lastImage === null) return;
    if (decodedFor !== state.lastImage) {
      const bitmap = await createImageBitmap(new Blob([state.lastImage], { type: "image/png" }));
      canvas.width = bitmap.width;
      canvas.height = bitmap.height;
      ctx.drawImage(bitmap, 0, 0);
      decoded = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
      decodedFor = state.lastImage;
      bitmap.close();
    }
    if (decoded === null) return;
    const rgba = new Uint8ClampedArray(decoded.data);
    if (state.lastMask !== null) {
      compositeMask(rgba, decoded.width, decoded.height, state.lastMask.bitmap);
      if (state.lastMask.clickU !== undefined && state.lastMask.clickV !== undefined) {
        drawDot(rgba, decoded.width, decoded.height, state.lastMask.clickU, state.lastMask.clickV);
      }
    }
    drawMarkers(rgba, decoded.width, decoded.height, state.trackedClicks);
    ctx.putImageData(new ImageData(rgba, decoded.width, decoded.height), 0, 0);
    selectionLabel.textContent = String(state.selectionCount);
  };

  const run = async (label: string, action: () => Promise<unknown>): Promise<void> => {
    setStatus(`${label}...`);
    const errorBefore = session.state.lastError;
    try {
      await action();
      // show a message only if this action produced one; old ones are stale
      const fresh = session.state.lastError !== errorBefore ? session.state.lastError : null;
      setStatus(fresh ?? "ready");
    } catch (err) {
      if (err instanceof ApiError) setStatus(`${label} failed: ${err.detail}`);
      else setStatus(`${label} failed: ${String(err)}`);
    }
    await redraw();
  };

  // --- orbit by dragging -------------------------------------------------
  let dragging = false;
  let moved = false;
  let lastX = 0;
  let lastY = 0;

  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    moved = false;
    lastX = ev.clientX;
    lastY = ev.clientY;
    canvas.setPointerCapture(ev.pointerId);
  });

  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    if (Math.abs(dx) + Math.abs(dy) < 2) return;
    moved = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    const orbit = session.state.orbit;
    void run("orbit", () => session.orbit({
      azimuth: orbit.azimuth - dx * ORBIT_SPEED,
      elevation: orbit.elevation + dy * ORBIT_SPEED,
    }));
  });

  canvas.addEventListener("pointerup", (ev) => {
    const wasDrag = moved;
    dragging = false;
    moved = false;
    canvas.releasePointerCapture(ev.pointerId);
    if (wasDrag || session.state.mode !== "click") return;
    // plain click: segment at the clicked pixel
    const rect = canvas.getBoundingClientRect();
    const u = (ev.clientX - rect.left) * (canvas.width / rect.width);
    const v = (ev.clientY - rect.top) * (canvas.height / rect.height);
    void run("segment", () => session.click(u, v));
  });

  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    const orbit = session.state.orbit;
    const radius = Math.max(0.5, orbit.radius * (ev.deltaY > 0 ? 1.1 : 1 / 1.1));
    void run("zoom", () => session.orbit({ radius }));
  }, { passive: false });

  // --- buttons -----------------------------------------------------------
  promptButton.addEventListener("click", () => {
    void run("prompt", () => session.prompt(promptInput.value));
  });
  promptInput.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") promptButton.click();
  });

  projectButton.addEventListener("click", () => {
    void run("project", () => session.project());
  });

  resetButton.addEventListener("click", () => {
    void run("reset", () => session.resetSelection());
  });

  exportButton.addEventListener("click", () => {
    void run("export", async () => {
      const obj = await session.exportSelected();
      const blob = new Blob([obj], { type: "text/plain" });
      const link = document.createElement("a");
      link.href = URL.createObjectURL(blob);
      link.download = "selection.obj";
      link.click();
      URL.revokeObjectURL(link.href);
    });
  });

  // --- boot --------------------------------------------------------------
  promptRow.style.display = session.state.mode === "prompt" ? "" : "none";
  if (info.promptVocabulary.length > 0) {
    promptInput.placeholder = info.promptVocabulary.join(", ");
  }
  await run("render", () => session.render());
}

if (typeof document !== "undefined" && document.getElementById("viewport") !== null) {
  start().catch((err) => {
    const status = document.getElementById("status");
    if (status !== null) status.textContent = `startup failed: ${String(err)}`;
  });
}
