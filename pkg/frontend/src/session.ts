/**
 * Annotation session state machine, independent of the DOM.
 *
 * One session = one annotator working one queue (label or adjudicate),
 * optionally filtered to a single task. All state here is recoverable from
 * the server: a hard refresh reloads the same current item because the
 * queue endpoint is idempotent until an answer is posted.
 */

import { ApiClient, ApiError } from "./api.js";
import type { Mode, QueueItem } from "./types.js";

export type Banner =
  | { kind: "info"; message: string }
  | { kind: "warning"; message: string }
  | { kind: "error"; message: string }
  | null;

export interface SessionState {
  annotator: string;
  mode: Mode;
  /** null = any task */
  taskFilter: string | null;
  current: QueueItem | null;
  /** true once the queue has been drained */
  done: boolean;
  answeredThisSession: number;
  startedAt: number;
  banner: Banner;
  busy: boolean;
}

export type SessionListener = (state: SessionState) => void;

export class AnnotationSession {
  private state: SessionState;
  private listeners: SessionListener[] = [];

  constructor(
    private readonly api: ApiClient,
    annotator: string,
    mode: Mode = "label",
    private readonly now: () => number = Date.now,
  ) {
    this.state = {
      annotator,
      mode,
      taskFilter: null,
      current: null,
      done: false,
      answeredThisSession: 0,
      startedAt: this.now(),
      banner: null,
      busy: false,
    };
  }

  snapshot(): SessionState {
    return { ...this.state };
  }

  onChange(listener: SessionListener): void {
    this.listeners.push(listener);
  }

  private update(patch: Partial<SessionState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.snapshot());
  }

  setTaskFilter(task: string | null): Promise<void> {
    this.update({ taskFilter: task, current: null, done: false });
    return this.loadNext();
  }

  setMode(mode: Mode): Promise<void> {
    this.update({ mode, current: null, done: false });
    return this.loadNext();
  }

  /** Answers per hour over this session, for the dashboard. */
  throughputPerHour(): number {
    const hours = (this.now() - this.state.startedAt) / 3_600_000;
    return hours > 0 ? this.state.answeredThisSession / hours : 0;
  }

  async loadNext(): Promise<void> {
    this.update({ busy: true });
    try {
      const item = await this.api.nextItem(
        this.state.mode,
        this.state.annotator,
        this.state.taskFilter ?? undefined,
      );
      this.update({ current: item, done: item === null, busy: false });
    } catch (error) {
      this.update({ busy: false, banner: { kind: "error", message: describe(error) } });
    }
  }

  /**
   * Submit the answer for the current item: a mention class in label mode,
   * a verdict in adjudicate mode. Advances on success; a duplicate (409)
   * shows a warning and still advances; any other failure keeps the item
   * on screen with the error inline.
   */
  async submit(choice: string): Promise<void> {
    const item = this.state.current;
    if (!item || this.state.busy) return;
    if (!item.choices.includes(choice)) {
      this.update({ banner: { kind: "error", message: `"${choice}" is not a valid answer here` } });
      return;
    }
    this.update({ busy: true, banner: null });
    try {
      if (item.mode === "label") {
        await this.api.submitLabel(item.item_id, choice, this.state.annotator);
      } else {
        await this.api.submitVerdict(item.item_id, choice, this.state.annotator);
      }
      this.update({
        busy: false,
        answeredThisSession: this.state.answeredThisSession + 1,
      });
      await this.loadNext();
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.update({
          busy: false,
          banner: { kind: "warning", message: "Already answered; skipping ahead." },
        });
        await this.loadNext();
      } else {
        this.update({ busy: false, banner: { kind: "error", message: describe(error) } });
      }
    }
  }

  /** Map a keyboard digit (1-based) onto the current item's choice set. */
  choiceForKey(digit: number): string | null {
    const item = this.state.current;
    if (!item || digit < 1 || digit > item.choices.length) return null;
    return item.choices[digit - 1];
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return error.message;
  if (error instanceof Error) return `Server unreachable: ${error.message}`;
  return String(error);
}
