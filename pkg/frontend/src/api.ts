/**
 * Typed client for the creative service HTTP API.
 *
 * The console renders server responses verbatim: no statistics or
 * bandit math happens on this side of the wire.
 */

export interface ReviewItem {
  image_hash: string;
  prompt_id: string;
  bucket: number;
  status: string;
  created_ts: number;
  updated_ts: number;
  attempts: number;
  failure_reason: string | null;
  prompt_text: string | null;
  creative_ref: string | null;
  original_ref: string;
}

export interface ArmStats {
  pulls: number;
  trace_a: number;
  mean_reward_estimate: number | null;
  category_id: string | null;
  prompt_text: string | null;
}

export interface BanditStats {
  alpha: number;
  d: number;
  total_pulls: number;
  arms: Record<string, ArmStats>;
}

export interface GroupStats {
  impressions: number;
  clicks: number;
  ctr: number;
}

export interface ReportSample {
  ts: number;
  n: number;
  ctr_bandit: number | null;
  ctr_control: number | null;
}

export interface AbReport {
  groups: Record<string, GroupStats>;
  relative_gain: number | null;
  z: number | null;
  p: number | null;
  samples: ReportSample[];
}

export interface ReviewActionResult {
  image_hash: string;
  prompt_id: string;
  bucket: number;
  status: string;
  approved: boolean;
}

export interface CreativeResponse {
  request_id: string;
  variant: "original" | "generated";
  image_ref: string | null;
  prompt_id?: string;
  ab_group: string;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export type ReviewAction = "approve" | "reject" | "regenerate";

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.baseUrl + path, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // body was not JSON; keep the status text
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? "{}" : JSON.stringify(body),
    });
  }

  health(): Promise<{ status: string }> {
    return this.request("/healthz");
  }

  async pendingReviews(limit = 50): Promise<ReviewItem[]> {
    const body = await this.request<{ items: ReviewItem[] }>(
      `/v1/review/pending?limit=${limit}`,
    );
    return body.items;
  }

  reviewAction(item: Pick<ReviewItem, "image_hash" | "prompt_id" | "bucket">,
               action: ReviewAction): Promise<ReviewActionResult> {
    const path = `/v1/review/${item.image_hash}/${encodeURIComponent(item.prompt_id)}/` +
      `${item.bucket}/${action}`;
    return this.post<ReviewActionResult>(path);
  }

  banditStats(): Promise<BanditStats> {
    return this.request("/v1/bandit/stats");
  }

  abReport(windowSeconds?: number): Promise<AbReport> {
    const query = windowSeconds ? `?window=${windowSeconds}` : "";
    return this.request(`/v1/ab/report${query}`);
  }

  /** Used by integration tests to drive traffic through the real API. */
  requestCreative(body: unknown): Promise<CreativeResponse> {
    return this.post("/v1/creative", body);
  }

  feedback(requestId: string, event: "impression" | "click"): Promise<{ status: string }> {
    return this.post("/v1/feedback", { request_id: requestId, event });
  }

  imageUrl(ref: string | null): string | null {
    return ref ? this.baseUrl + ref : null;
  }
}
