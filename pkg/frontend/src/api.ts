/** Thin typed client for the annotation service. */

import type { Metrics, Mode, QueueItem, RoundStatus } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function detailOf(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    return body.detail ?? response.statusText;
  } catch {
    return response.statusText;
  }
}

export class ApiClient {
  constructor(private readonly baseUrl: string = "") {}

  private url(path: string): string {
    return this.baseUrl + path;
  }

  /** Next unanswered item for this annotator, or null when the queue is drained. */
  async nextItem(mode: Mode, annotator: string, task?: string): Promise<QueueItem | null> {
    const params = new URLSearchParams({ mode, annotator });
    if (task) params.set("task", task);
    const response = await fetch(this.url(`/api/v1/queue/next?${params}`));
    if (response.status === 204) return null;
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return (await response.json()) as QueueItem;
  }

  async submitLabel(itemId: string, label: string, annotator: string): Promise<void> {
    const response = await fetch(this.url("/api/v1/annotations"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ item_id: itemId, label, annotator }),
    });
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
  }

  async submitVerdict(itemId: string, verdict: string, annotator: string): Promise<void> {
    const response = await fetch(this.url("/api/v1/adjudications"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ item_id: itemId, verdict, annotator }),
    });
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
  }

  async metrics(): Promise<Metrics> {
    const response = await fetch(this.url("/api/v1/metrics"));
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return (await response.json()) as Metrics;
  }

  async startRound(): Promise<RoundStatus> {
    const response = await fetch(this.url("/api/v1/rounds"), { method: "POST" });
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return (await response.json()) as RoundStatus;
  }

  async roundStatus(roundId: string): Promise<RoundStatus> {
    const response = await fetch(this.url(`/api/v1/rounds/${roundId}`));
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return (await response.json()) as RoundStatus;
  }
}
