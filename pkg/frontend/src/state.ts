// View state and the pure geometry helpers behind pan/zoom and rectangle
// selection. Everything here is renderable from server data alone; the
// client never derives pixels locally.

import type { Rect } from "./api.js";

export interface Camera {
  centerX: number; // canvas coords
  centerY: number;
  zoom: number; // screen px per canvas px
}

export interface ViewState {
  sessionId: string | null;
  bounds: Rect | null;
  resolution: number | null;
  historyLength: number;
  camera: Camera;
  pending: string | null; // op kind while a mutation is in flight
  editMode: boolean;
}

export function initialViewState(): ViewState {
  return {
    sessionId: null,
    bounds: null,
    resolution: null,
    historyLength: 0,
    camera: { centerX: 16, centerY: 16, zoom: 8 },
    pending: null,
    editMode: false,
  };
}

export function fitCamera(bounds: Rect, viewportW: number, viewportH: number): Camera {
  const [x0, y0, x1, y1] = bounds;
  const w = Math.max(x1 - x0, 1);
  const h = Math.max(y1 - y0, 1);
  const zoom = Math.max(1, Math.min(viewportW / (w * 1.25), viewportH / (h * 1.25)));
  return { centerX: (x0 + x1) / 2, centerY: (y0 + y1) / 2, zoom };
}

export function canvasToScreen(
  camera: Camera, x: number, y: number, viewportW: number, viewportH: number,
): { x: number; y: number } {
  return {
    x: viewportW / 2 + (x - camera.centerX) * camera.zoom,
    y: viewportH / 2 + (y - camera.centerY) * camera.zoom,
  };
}

export function screenToCanvas(
  camera: Camera, sx: number, sy: number, viewportW: number, viewportH: number,
): { x: number; y: number } {
  return {
    x: camera.centerX + (sx - viewportW / 2) / camera.zoom,
    y: camera.centerY + (sy - viewportH / 2) / camera.zoom,
  };
}

export function panCamera(camera: Camera, dxScreen: number, dyScreen: number): Camera {
  return {
    ...camera,
    centerX: camera.centerX - dxScreen / camera.zoom,
    centerY: camera.centerY - dyScreen / camera.zoom,
  };
}

export function zoomCamera(camera: Camera, factor: number): Camera {
  const zoom = Math.min(64, Math.max(0.5, camera.zoom * factor));
  return { ...camera, zoom };
}

/** Normalized integer rect from two drag corners in canvas coordinates. */
export function dragRect(
  ax: number, ay: number, bx: number, by: number,
): Rect {
  const x0 = Math.floor(Math.min(ax, bx));
  const y0 = Math.floor(Math.min(ay, by));
  const x1 = Math.ceil(Math.max(ax, bx));
  const y1 = Math.ceil(Math.max(ay, by));
  return [x0, y0, x1, y1];
}

export function clampRectTo(rect: Rect, bounds: Rect): Rect {
  return [
    Math.max(rect[0], bounds[0]),
    Math.max(rect[1], bounds[1]),
    Math.min(rect[2], bounds[2]),
    Math.min(rect[3], bounds[3]),
  ];
}

export function rectIsEmpty(rect: Rect): boolean {
  return rect[2] <= rect[0] || rect[3] <= rect[1];
}
