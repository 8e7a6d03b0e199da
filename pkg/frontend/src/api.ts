import type {
  DecisionRequest,
  DecisionResponse,
  ErrorBody,
  Metrics,
  ReviewItem,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Non-2xx responses carry a uniform {error, detail} body. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    readonly detail: unknown,
  ) {
    super(`${status} ${code}`);
    this.name = "ApiError";
  }
}

export interface ClientOptions {
  baseUrl?: string;
  token?: string;
  fetchImpl?: FetchLike;
}

export class ReviewClient {
  private readonly baseUrl: string;
  private readonly token: string;
  private readonly fetchImpl: FetchLike;

  constructor(options: ClientOptions = {}) {
    this.baseUrl = (options.baseUrl ?? "").replace(/\/+$/, "");
    this.token = options.token ?? "";
    // bind late so a global fetch polyfill installed after construction works
    this.fetchImpl = options.fetchImpl ?? ((input, init) => fetch(input, init));
  }

  queue(limit = 50): Promise<{ items: ReviewItem[] }> {
    return this.request("GET", `/v1/review/queue?limit=${limit}`);
  }

  item(itemId: string): Promise<ReviewItem> {
    return this.request("GET", `/v1/review/${encodeURIComponent(itemId)}`);
  }

  decide(itemId: string, body: DecisionRequest): Promise<DecisionResponse> {
    return this.request(
      "POST",
      `/v1/review/${encodeURIComponent(itemId)}/decision`,
      body,
    );
  }

  metrics(): Promise<Metrics> {
    return this.request("GET", "/v1/metrics");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = { accept: "application/json" };
    if (this.token) {
      headers.authorization = `Bearer ${this.token}`;
    }
    if (body !== undefined) {
      headers["content-type"] = "application/json";
    }
    const response = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload: unknown = await response.json().catch(() => null);
    if (!response.ok) {
      const err = (payload ?? {}) as Partial<ErrorBody>;
      throw new ApiError(response.status, err.error ?? "unknown_error", err.detail ?? null);
    }
    return payload as T;
  }
}
