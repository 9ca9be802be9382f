// Typed client for the studio service. Request bodies mirror the HTTP
// contract exactly; never add fields here without updating the contract
// fixture, the CI check compares the two.

export type Rect = [number, number, number, number];

export interface CreateSessionRequest {
  prompt: string;
  resolution_m_per_px: number;
  omega?: number;
  seed?: number;
}

export interface CreateSessionResponse {
  session_id: string;
  bounds: Rect;
}

export interface ExtendRequest {
  direction?: string;
  rect?: Rect;
  prompt: string;
  omega?: number;
  seed?: number;
}

export interface ExtendResponse {
  bounds: Rect;
  seam_score: number;
}

export interface EditRequest {
  rect: Rect;
  prompt: string;
  omega?: number;
  seed?: number;
}

export interface EditResponse {
  bounds: Rect;
}

export interface ProgressResponse {
  status: "idle" | "running";
  session_id: string;
  op_kind?: string;
  current_denoise_step?: number;
  total_steps?: number;
}

export interface SessionSummary {
  session_id: string;
  bounds: Rect;
  resolution_m_per_px: number;
  history_length: number;
  status: string;
  created_at: number;
  updated_at: number;
}

export class BusyError extends Error {}
export class ValidationError extends Error {}

async function toError(response: Response): Promise<Error> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (body && body.detail) detail = String(body.detail);
  } catch {
    // non-JSON error body; keep the status text
  }
  if (response.status === 409) return new BusyError(detail);
  if (response.status === 422) return new ValidationError(detail);
  return new Error(`${response.status}: ${detail}`);
}

export class StudioClient {
  constructor(private baseUrl: string = "") {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw await toError(response);
    return response.json();
  }

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(this.baseUrl + path);
    if (!response.ok) throw await toError(response);
    return response.json();
  }

  createSession(req: CreateSessionRequest): Promise<CreateSessionResponse> {
    return this.post("/sessions", req);
  }

  extend(sessionId: string, req: ExtendRequest): Promise<ExtendResponse> {
    return this.post(`/sessions/${sessionId}/extend`, req);
  }

  edit(sessionId: string, req: EditRequest): Promise<EditResponse> {
    return this.post(`/sessions/${sessionId}/edit`, req);
  }

  undo(sessionId: string): Promise<EditResponse> {
    return this.post(`/sessions/${sessionId}/undo`, {});
  }

  progress(sessionId: string): Promise<ProgressResponse> {
    return this.get(`/sessions/${sessionId}/progress`);
  }

  listSessions(): Promise<SessionSummary[]> {
    return this.get("/sessions");
  }

  // The render endpoint returns PNG bytes; the view uses it as an <img>
  // source. The version parameter keys browser caching to history length.
  renderUrl(sessionId: string, rect: Rect, version: number, scale = 1): string {
    const [x0, y0, x1, y1] = rect;
    const query = `x0=${x0}&y0=${y0}&x1=${x1}&y1=${y1}&scale=${scale}&v=${version}`;
    return `${this.baseUrl}/sessions/${sessionId}/render?${query}`;
  }
}
