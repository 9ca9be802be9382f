// Studio application: session browser, unbounded canvas view, extension
// arrows, rectangle editing, progress overlay and undo. Every mutation
// round-trips through the HTTP contract and the view re-fetches server
// state afterwards; nothing is updated optimistically.

import {
  BusyError,
  Rect,
  StudioClient,
  ValidationError,
} from "./api.js";
import {
  ViewState,
  canvasToScreen,
  clampRectTo,
  dragRect,
  fitCamera,
  initialViewState,
  panCamera,
  rectIsEmpty,
  screenToCanvas,
  zoomCamera,
} from "./state.js";

const POLL_INTERVAL_MS = 1000;

export class StudioApp {
  readonly client: StudioClient;
  state: ViewState = initialViewState();
  private root: HTMLElement;
  private pollTimer: ReturnType<typeof setInterval> | null = null;
  private dragStart: { x: number; y: number } | null = null;
  private selection: Rect | null = null;

  constructor(root: HTMLElement, client: StudioClient) {
    this.root = root;
    this.client = client;
    this.renderSkeleton();
  }

  // -- static DOM ----------------------------------------------------------

  private renderSkeleton(): void {
    this.root.innerHTML = `
      <aside class="sidebar">
        <h1>toyearth studio</h1>
        <form id="create-form">
          <input id="create-prompt" placeholder="describe the base tile" />
          <select id="create-resolution">
            ${[0.5, 1, 2, 4, 8, 16]
              .map((r) => `<option value="${r}" ${r === 1 ? "selected" : ""}>${r} m/px</option>`)
              .join("")}
          </select>
          <input id="create-seed" type="number" value="0" title="seed" />
          <button id="create-button" type="submit">new canvas</button>
          <div id="create-error" class="error" role="alert"></div>
        </form>
        <h2>sessions</h2>
        <ul id="session-list"></ul>
      </aside>
      <main class="stage">
        <div class="toolbar">
          <input id="op-prompt" placeholder="prompt for extend / edit" />
          <label><input id="edit-mode" type="checkbox" /> edit region</label>
          <button id="undo-button">undo</button>
          <label><input id="advanced-toggle" type="checkbox" /> advanced</label>
          <span id="advanced-panel" hidden>
            <input id="rect-input" placeholder="x0,y0,x1,y1" size="12" />
            <button id="extend-rect-button">extend rect</button>
            <button id="edit-rect-button">edit rect</button>
          </span>
          <span id="status-line" aria-live="polite"></span>
        </div>
        <div id="viewport" class="viewport">
          <img id="canvas-img" alt="canvas" draggable="false" />
          <div id="selection-box" hidden></div>
          <button class="arrow arrow-n" data-direction="N" title="extend north">&#9650;</button>
          <button class="arrow arrow-s" data-direction="S" title="extend south">&#9660;</button>
          <button class="arrow arrow-e" data-direction="E" title="extend east">&#9654;</button>
          <button class="arrow arrow-w" data-direction="W" title="extend west">&#9664;</button>
          <div id="progress-overlay" hidden></div>
        </div>
      </main>`;
    this.bindEvents();
  }

  private el<T extends HTMLElement>(id: string): T {
    return this.root.querySelector(`#${id}`) as T;
  }

  private bindEvents(): void {
    this.el<HTMLFormElement>("create-form").addEventListener("submit", (e) => {
      e.preventDefault();
      void this.createSession();
    });
    for (const arrow of this.root.querySelectorAll<HTMLButtonElement>(".arrow")) {
      arrow.addEventListener("click", () => {
        void this.extendDirection(arrow.dataset.direction as string);
      });
    }
    this.el<HTMLButtonElement>("undo-button").addEventListener("click", () => {
      void this.undo();
    });
    this.el<HTMLInputElement>("advanced-toggle").addEventListener("change", (e) => {
      this.el("advanced-panel").hidden = !(e.target as HTMLInputElement).checked;
    });
    this.el<HTMLButtonElement>("extend-rect-button").addEventListener("click", () => {
      const rect = this.parseRectInput();
      if (rect) void this.extendRect(rect);
    });
    this.el<HTMLButtonElement>("edit-rect-button").addEventListener("click", () => {
      const rect = this.parseRectInput();
      if (rect) void this.editRect(rect);
    });
    this.el<HTMLInputElement>("edit-mode").addEventListener("change", (e) => {
      this.state.editMode = (e.target as HTMLInputElement).checked;
    });
    const viewport = this.el<HTMLDivElement>("viewport");
    viewport.addEventListener("pointerdown", (e) => this.onPointerDown(e));
    viewport.addEventListener("pointermove", (e) => this.onPointerMove(e));
    viewport.addEventListener("pointerup", (e) => void this.onPointerUp(e));
    viewport.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.state.camera = zoomCamera(this.state.camera, e.deltaY < 0 ? 1.2 : 1 / 1.2);
      this.layout();
    });
  }

  // -- lifecycle -----------------------------------------------------------

  async init(): Promise<void> {
    await this.refreshSessionList();
    const fromHash = window.location.hash.replace(/^#/, "");
    if (fromHash) {
      await this.selectSession(fromHash);
    }
  }

  dispose(): void {
    this.stopPolling();
  }

  // -- server round-trips --------------------------------------------------

  private setStatus(text: string): void {
    this.el("status-line").textContent = text;
  }

  async refreshSessionList(): Promise<void> {
    const sessions = await this.client.listSessions();
    const list = this.el<HTMLUListElement>("session-list");
    list.innerHTML = "";
    for (const s of sessions) {
      const item = document.createElement("li");
      const button = document.createElement("button");
      button.textContent = `${s.session_id} · ${s.resolution_m_per_px} m/px · ${s.history_length} ops`;
      button.dataset.sessionId = s.session_id;
      button.addEventListener("click", () => void this.selectSession(s.session_id));
      item.appendChild(button);
      list.appendChild(item);
    }
    if (this.state.sessionId !== null) {
      const mine = sessions.find((s) => s.session_id === this.state.sessionId);
      if (mine) {
        this.state.bounds = mine.bounds;
        this.state.resolution = mine.resolution_m_per_px;
        this.state.historyLength = mine.history_length;
      }
    }
  }

  async selectSession(sessionId: string): Promise<void> {
    const sessions = await this.client.listSessions();
    const mine = sessions.find((s) => s.session_id === sessionId);
    if (!mine) {
      this.setStatus(`unknown session ${sessionId}`);
      return;
    }
    this.state.sessionId = sessionId;
    this.state.bounds = mine.bounds;
    this.state.resolution = mine.resolution_m_per_px;
    this.state.historyLength = mine.history_length;
    const viewport = this.el<HTMLDivElement>("viewport").getBoundingClientRect();
    this.state.camera = fitCamera(mine.bounds, viewport.width || 800, viewport.height || 600);
    window.location.hash = sessionId;
    this.layout();
  }

  async createSession(): Promise<void> {
    const prompt = this.el<HTMLInputElement>("create-prompt").value.trim();
    const errorBox = this.el("create-error");
    errorBox.textContent = "";
    if (!prompt) {
      errorBox.textContent = "prompt must not be blank";
      return;
    }
    const resolution = Number(this.el<HTMLSelectElement>("create-resolution").value);
    const seed = Number(this.el<HTMLInputElement>("create-seed").value) || 0;
    await this.runMutation("seed", async () => {
      const created = await this.client.createSession({
        prompt,
        resolution_m_per_px: resolution,
        seed,
      });
      await this.selectSession(created.session_id);
    });
  }

  async extendDirection(direction: string): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    const prompt = this.el<HTMLInputElement>("op-prompt").value;
    await this.runMutation("extend", () =>
      this.client.extend(sessionId, { direction, prompt, seed: this.opSeed() }),
    );
  }

  async extendRect(rect: Rect): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    const prompt = this.el<HTMLInputElement>("op-prompt").value;
    await this.runMutation("extend", () =>
      this.client.extend(sessionId, { rect, prompt, seed: this.opSeed() }),
    );
  }

  async editRect(rect: Rect): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    const prompt = this.el<HTMLInputElement>("op-prompt").value;
    await this.runMutation("edit", () =>
      this.client.edit(sessionId, { rect, prompt, seed: this.opSeed() }),
    );
  }

  async undo(): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    await this.runMutation("undo", () => this.client.undo(sessionId));
  }

  /** Deterministic default op seed: one per history position. */
  private opSeed(): number {
    return this.state.historyLength;
  }

  private async runMutation(kind: string, op: () => Promise<unknown>): Promise<void> {
    if (this.state.pending) {
      this.setStatus("operation in progress");
      return;
    }
    this.state.pending = kind;
    this.setStatus(`${kind}…`);
    this.startPolling();
    try {
      await op();
      await this.refreshSessionList();
      this.layout();
      this.setStatus("");
    } catch (error) {
      if (error instanceof BusyError) {
        this.setStatus("operation in progress");
      } else if (error instanceof ValidationError) {
        this.setStatus(`invalid request: ${error.message}`);
      } else {
        this.setStatus(String(error));
      }
    } finally {
      this.state.pending = null;
      this.stopPolling();
      this.el<HTMLDivElement>("progress-overlay").hidden = true;
    }
  }

  // -- progress polling (1 Hz) ----------------------------------------------

  private startPolling(): void {
    if (this.pollTimer !== null) return;
    this.pollTimer = setInterval(() => void this.pollProgress(), POLL_INTERVAL_MS);
  }

  private stopPolling(): void {
    if (this.pollTimer !== null) {
      clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }

  private async pollProgress(): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) return;
    const progress = await this.client.progress(sessionId);
    const overlay = this.el<HTMLDivElement>("progress-overlay");
    if (progress.status === "running") {
      overlay.hidden = false;
      overlay.textContent =
        `${progress.op_kind}: step ${progress.current_denoise_step}/${progress.total_steps}`;
    } else {
      overlay.hidden = true;
    }
  }

  // -- pan / selection gestures ---------------------------------------------

  private viewportSize(): { w: number; h: number } {
    const box = this.el<HTMLDivElement>("viewport").getBoundingClientRect();
    return { w: box.width || 800, h: box.height || 600 };
  }

  private onPointerDown(e: PointerEvent): void {
    this.dragStart = { x: e.offsetX, y: e.offsetY };
    if (!this.state.editMode) return;
    this.el<HTMLDivElement>("selection-box").hidden = false;
  }

  private onPointerMove(e: PointerEvent): void {
    if (!this.dragStart) return;
    if (this.state.editMode) {
      this.updateSelection(e.offsetX, e.offsetY);
    } else {
      this.state.camera = panCamera(
        this.state.camera, e.offsetX - this.dragStart.x, e.offsetY - this.dragStart.y,
      );
      this.dragStart = { x: e.offsetX, y: e.offsetY };
      this.layout();
    }
  }

  private updateSelection(sx: number, sy: number): void {
    if (!this.dragStart || !this.state.bounds) return;
    const { w, h } = this.viewportSize();
    const a = screenToCanvas(this.state.camera, this.dragStart.x, this.dragStart.y, w, h);
    const b = screenToCanvas(this.state.camera, sx, sy, w, h);
    this.selection = clampRectTo(dragRect(a.x, a.y, b.x, b.y), this.state.bounds);
    const box = this.el<HTMLDivElement>("selection-box");
    const p0 = canvasToScreen(this.state.camera, this.selection[0], this.selection[1], w, h);
    const p1 = canvasToScreen(this.state.camera, this.selection[2], this.selection[3], w, h);
    box.style.left = `${p0.x}px`;
    box.style.top = `${p0.y}px`;
    box.style.width = `${p1.x - p0.x}px`;
    box.style.height = `${p1.y - p0.y}px`;
  }

  private async onPointerUp(e: PointerEvent): Promise<void> {
    const wasDragging = this.dragStart !== null;
    this.dragStart = null;
    if (!this.state.editMode || !wasDragging) return;
    this.updateSelection(e.offsetX, e.offsetY);
    this.el<HTMLDivElement>("selection-box").hidden = true;
    if (this.selection && !rectIsEmpty(this.selection)) {
      await this.editRect(this.selection);
      this.selection = null;
    }
  }

  private parseRectInput(): Rect | null {
    const raw = this.el<HTMLInputElement>("rect-input").value;
    const parts = raw.split(",").map((v) => Number(v.trim()));
    if (parts.length !== 4 || parts.some((v) => !Number.isFinite(v))) {
      this.setStatus(`cannot parse rect: ${raw}`);
      return null;
    }
    return parts as unknown as Rect;
  }

  // -- view -----------------------------------------------------------------

  /** Reposition the canvas image for the current camera and history. */
  layout(): void {
    const { sessionId, bounds, historyLength } = this.state;
    const img = this.el<HTMLImageElement>("canvas-img");
    if (!sessionId || !bounds) {
      img.removeAttribute("src");
      return;
    }
    img.src = this.client.renderUrl(sessionId, bounds, historyLength);
    const { w, h } = this.viewportSize();
    const origin = canvasToScreen(this.state.camera, bounds[0], bounds[1], w, h);
    img.style.left = `${origin.x}px`;
    img.style.top = `${origin.y}px`;
    img.style.width = `${(bounds[2] - bounds[0]) * this.state.camera.zoom}px`;
    img.style.height = `${(bounds[3] - bounds[1]) * this.state.camera.zoom}px`;
  }
}

export function mountStudio(root: HTMLElement, baseUrl = ""): StudioApp {
  return new StudioApp(root, new StudioClient(baseUrl));
}
