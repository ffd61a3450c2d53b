/**
 * Thin clients for the broker and validator HTTP APIs.
 *
 * Mutating calls are sent exactly once; a failure becomes an ApiError
 * for the caller to surface. Nothing here retries, caches, or touches
 * the datastore directly.
 */

import type {
  AttestationSummary,
  BrokerState,
  Jwk,
  Pac,
  ValidationReport,
} from "./types.js";

// structural subset of fetch, so tests can plug in their own transport
export interface FetchInit {
  method?: string;
  headers?: Record<string, string>;
  body?: string;
}

export interface FetchResponse {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (url: string, init?: FetchInit) => Promise<FetchResponse>;

export class ApiError extends Error {
  status: number;
  reason: string | null;

  constructor(message: string, status: number, reason: string | null = null) {
    super(message);
    this.status = status;
    this.reason = reason;
  }
}

// services answer either {ok:false, reason, message} or {error:{code, message}}
async function throwFrom(resp: FetchResponse): Promise<never> {
  let reason: string | null = null;
  let message = `HTTP ${resp.status}`;
  try {
    const body: unknown = await resp.json();
    if (body && typeof body === "object") {
      const b = body as Record<string, unknown>;
      if (typeof b.reason === "string") reason = b.reason;
      if (typeof b.message === "string" && b.message) message = b.message;
      const err = b.error;
      if (err && typeof err === "object") {
        const e = err as Record<string, unknown>;
        if (typeof e.code === "string") reason = e.code;
        if (typeof e.message === "string" && e.message) message = e.message;
      }
    }
  } catch {
    // non-JSON error body; the status line is all we have
  }
  throw new ApiError(message, resp.status, reason);
}

async function parse<T>(resp: FetchResponse): Promise<T> {
  if (!resp.ok) await throwFrom(resp);
  return (await resp.json()) as T;
}

export class BrokerApi {
  readonly baseUrl: string;
  private token: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, token: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.token = token;
    this.fetchFn = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  private headers(): Record<string, string> {
    return {
      authorization: `Bearer ${this.token}`,
      "content-type": "application/json",
    };
  }

  async state(): Promise<BrokerState> {
    const resp = await this.fetchFn(`${this.baseUrl}/state`, {
      method: "GET",
      headers: this.headers(),
    });
    return parse<BrokerState>(resp);
  }

  async authorize(jwk: Jwk, name: string): Promise<{ client_id: string }> {
    const resp = await this.fetchFn(`${this.baseUrl}/authorize`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify({ jwk, name }),
    });
    return parse<{ client_id: string }>(resp);
  }

  async attest(hk: string): Promise<AttestationSummary> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/channels/${encodeURIComponent(hk)}/attest`,
      { method: "POST", headers: this.headers() },
    );
    return parse<AttestationSummary>(resp);
  }

  async provision(
    hk: string,
    filter: Record<string, unknown>,
  ): Promise<{ provision_id: string; scopes: string[] }> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/channels/${encodeURIComponent(hk)}/provision`,
      {
        method: "POST",
        headers: this.headers(),
        body: JSON.stringify({ filter }),
      },
    );
    return parse<{ provision_id: string; scopes: string[] }>(resp);
  }
}

export class ValidatorApi {
  readonly baseUrl: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  async validate(
    pac: Pac,
    level: number,
    minSvn?: number | null,
  ): Promise<ValidationReport> {
    const body: Record<string, unknown> = { pac, level };
    if (minSvn !== undefined && minSvn !== null) body.min_svn = minSvn;
    const resp = await this.fetchFn(`${this.baseUrl}/validate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return parse<ValidationReport>(resp);
  }
}
