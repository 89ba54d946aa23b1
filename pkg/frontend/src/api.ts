/** Typed client for the restoration HTTP API (base64 PNG payloads). */

export interface PromptPair {
  backbone: string;
  control: string;
}

export interface RestoreRequestBody {
  image: string;
  instruction: string;
  seed: number;
  steps: number;
}

export interface RestoreResponse {
  image: string;
  mask: string;
  prompts: PromptPair;
  timings_ms: number;
}

export interface PreviewResponse {
  mask: string;
  prompts: PromptPair;
}

export interface HealthStatus {
  ok: boolean;
  checkpointId?: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const parsed = (await res.json()) as { detail?: string };
        detail = parsed.detail ?? detail;
      } catch {
        // body was not JSON; keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  async health(): Promise<HealthStatus> {
    try {
      const res = await this.fetchFn(this.baseUrl + "/api/health");
      if (!res.ok) return { ok: false };
      const body = (await res.json()) as { checkpoint_id?: string };
      return { ok: true, checkpointId: body.checkpoint_id };
    } catch {
      return { ok: false };
    }
  }

  previewMask(body: RestoreRequestBody): Promise<PreviewResponse> {
    return this.post<PreviewResponse>("/api/preview-mask", body);
  }

  restore(body: RestoreRequestBody): Promise<RestoreResponse> {
    return this.post<RestoreResponse>("/api/restore", body);
  }
}
