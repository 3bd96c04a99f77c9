/** Typed fetch client for the dosing service, with a per-dose what-if cache. */

import type {
  Covariates,
  PolicyId,
  Recommendation,
  SessionCreated,
  SessionEvent,
  SessionSummary,
  WhatIfResult,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ status: number; json(): Promise<unknown> }>;

async function request<T>(
  fetchFn: FetchLike,
  url: string,
  init?: { method?: string; body?: unknown },
): Promise<T> {
  const res = await fetchFn(url, {
    method: init?.method ?? "GET",
    headers: init?.body !== undefined ? { "content-type": "application/json" } : undefined,
    body: init?.body !== undefined ? JSON.stringify(init.body) : undefined,
  });
  const data = (await res.json()) as Record<string, unknown>;
  if (res.status >= 400) {
    throw new ApiError(res.status, String(data["detail"] ?? "request failed"));
  }
  return data as T;
}

export class DosingClient {
  /** Cached what-if responses keyed by (cycle, dose); cleared on new events. */
  private whatifCache = new Map<string, WhatIfResult>();
  whatifCalls = 0;

  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) =>
      fetch(url, init as RequestInit),
  ) {}

  createSession(
    covariates: Covariates,
    seed?: number,
    requestId?: string,
  ): Promise<SessionCreated> {
    return request(this.fetchFn, `${this.baseUrl}/v1/sessions`, {
      method: "POST",
      body: { covariates, seed, request_id: requestId },
    });
  }

  getSession(id: string): Promise<SessionSummary> {
    return request(this.fetchFn, `${this.baseUrl}/v1/sessions/${id}`);
  }

  async recordEvent(id: string, event: SessionEvent): Promise<SessionSummary> {
    const summary = await request<SessionSummary>(
      this.fetchFn,
      `${this.baseUrl}/v1/sessions/${id}/events`,
      { method: "POST", body: event },
    );
    this.whatifCache.clear();
    return summary;
  }

  recommendation(
    id: string,
    policy: PolicyId,
    seed = 0,
  ): Promise<Recommendation> {
    return request(
      this.fetchFn,
      `${this.baseUrl}/v1/sessions/${id}/recommendation?policy=${policy}&seed=${seed}`,
    );
  }

  async whatif(id: string, cycle: number, doseMg: number): Promise<WhatIfResult> {
    const key = `${cycle}:${doseMg.toFixed(3)}`;
    const cached = this.whatifCache.get(key);
    if (cached) {
      return cached;
    }
    this.whatifCalls += 1;
    const result = await request<WhatIfResult>(
      this.fetchFn,
      `${this.baseUrl}/v1/sessions/${id}/whatif?dose_mg=${doseMg}`,
    );
    this.whatifCache.set(key, result);
    return result;
  }
}
