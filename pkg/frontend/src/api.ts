/** Thin typed client over the review service HTTP API.
 *
 * Failures map to distinct error classes so the UI can choose between a
 * login prompt (auth), a queue refresh (conflict), and a retry
 * affordance (network).
 */

import type { Progress, QueueResponse, RubricSubmission } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export class AuthError extends ApiError {
  constructor(message = "not authorized") {
    super(401, message);
  }
}

export class ConflictError extends ApiError {
  constructor(message = "already scored") {
    super(409, message);
  }
}

export class NetworkError extends Error {
  constructor(message = "network unreachable") {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ReviewApi {
  constructor(
    private readonly baseUrl: string,
    private readonly token: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request(path: string, init: RequestInit = {}): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, {
        ...init,
        headers: {
          Authorization: `Bearer ${this.token}`,
          "Content-Type": "application/json",
          ...(init.headers ?? {}),
        },
      });
    } catch {
      throw new NetworkError();
    }
    if (response.status === 401 || response.status === 403) {
      throw new AuthError(await safeDetail(response));
    }
    if (response.status === 409) {
      throw new ConflictError(await safeDetail(response));
    }
    if (!response.ok) {
      throw new ApiError(response.status, await safeDetail(response));
    }
    return response;
  }

  async loadQueue(reviewerId: string): Promise<QueueResponse> {
    const response = await this.request(`/api/reviewers/${encodeURIComponent(reviewerId)}/queue`);
    return (await response.json()) as QueueResponse;
  }

  async submitScore(assignmentId: string, rubric: RubricSubmission): Promise<void> {
    await this.request(`/api/assignments/${encodeURIComponent(assignmentId)}/score`, {
      method: "POST",
      body: JSON.stringify(rubric),
    });
  }

  async progress(): Promise<Progress> {
    const response = await this.request("/api/progress");
    return (await response.json()) as Progress;
  }
}

async function safeDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    return body.detail ?? `HTTP ${response.status}`;
  } catch {
    return `HTTP ${response.status}`;
  }
}
