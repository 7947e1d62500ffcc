/**
 * Dashboard state: polls /metrics, tracks round progress, survives server
 * outages with an offline flag instead of losing state.
 */

import { ApiClient, ApiError } from "./api.js";
import type { Metrics } from "./types.js";

export interface DashboardState {
  metrics: Metrics | null;
  offline: boolean;
  roundRunning: boolean;
  lastError: string | null;
}

export type DashboardListener = (state: DashboardState) => void;

export class Dashboard {
  private state: DashboardState = {
    metrics: null,
    offline: false,
    roundRunning: false,
    lastError: null,
  };
  private listeners: DashboardListener[] = [];
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(private readonly api: ApiClient) {}

  snapshot(): DashboardState {
    return { ...this.state };
  }

  onChange(listener: DashboardListener): void {
    this.listeners.push(listener);
  }

  private update(patch: Partial<DashboardState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.snapshot());
  }

  async refresh(): Promise<void> {
    try {
      const metrics = await this.api.metrics();
      this.update({
        metrics,
        offline: false,
        roundRunning: metrics.round?.status === "running",
      });
    } catch {
      // keep the last metrics; just flag the outage
      this.update({ offline: true });
    }
  }

  startPolling(intervalMs = 3000): void {
    this.stopPolling();
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), intervalMs);
  }

  stopPolling(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  /** Kick off a fine-tune round; 409 (already running) becomes state, not a throw. */
  async triggerRound(): Promise<void> {
    try {
      await this.api.startRound();
      this.update({ roundRunning: true, lastError: null });
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.update({ roundRunning: true });
      } else {
        this.update({ lastError: error instanceof Error ? error.message : String(error) });
      }
    }
    await this.refresh();
  }
}
