// Typed client for the evaluation service HTTP+JSON API.
// The UI never computes metrics itself; everything numeric comes from here.

export interface RoundPayload {
  sketch_url: string;
  candidates: string[];
  index: number;
  total: number;
  feedback_mode: boolean;
}

export interface Feedback {
  correct: boolean;
  target: number;
}

export interface GuessResponse {
  accepted: boolean;
  feedback: Feedback | null;
}

export interface SessionStatsEntry {
  token: string;
  setting: string;
  feedback: boolean;
  answered: number;
  total_rounds: number;
  complete: boolean;
  comm_rate: number | null;
  class_comm_rate: number | null;
  mean_elapsed_ms: number | null;
  p50_elapsed_ms: number | null;
  p90_elapsed_ms: number | null;
}

export interface SettingStats {
  sessions: number;
  completed_sessions: number;
  answered: number;
  comm_rate: number | null;
  class_comm_rate: number | null;
  mean_elapsed_ms: number | null;
  p50_elapsed_ms: number | null;
  p90_elapsed_ms: number | null;
}

export interface StatsPayload {
  sessions: SessionStatsEntry[];
  settings: Record<string, SettingStats>;
  session_count: number;
}

export class ApiError extends Error {
  status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, init);
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body; keep the status text */
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json() as Promise<T>;
}

export class ApiClient {
  baseUrl: string;

  constructor(baseUrl = "") {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  getRound(token: string, index: number): Promise<RoundPayload> {
    return request(`${this.baseUrl}/session/${token}/round/${index}`);
  }

  submitGuess(
    token: string,
    index: number,
    guess: number,
    elapsedMs: number,
  ): Promise<GuessResponse> {
    return request(`${this.baseUrl}/session/${token}/guess`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ index, guess, elapsed_ms: elapsedMs }),
    });
  }

  getStats(adminToken: string): Promise<StatsPayload> {
    return request(`${this.baseUrl}/admin/stats`, {
      headers: { "X-Admin-Token": adminToken },
    });
  }

  createSession(
    adminToken: string,
    spec: Record<string, unknown>,
  ): Promise<{ token: string }> {
    return request(`${this.baseUrl}/admin/sessions`, {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        "X-Admin-Token": adminToken,
      },
      body: JSON.stringify(spec),
    });
  }

  // Resolve a server-relative image URL against the service origin.
  imageUrl(path: string): string {
    return path.startsWith("http") ? path : this.baseUrl + path;
  }
}
