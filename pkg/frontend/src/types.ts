/**
 * Wire types for /api/v1. The server is the single authority on label
 * validity: clients render exactly the `choices` an item declares and
 * never infer a choice set locally.
 */

export type Mode = "label" | "adjudicate";

export interface QueueItem {
  item_id: string;
  dedup_key: string;
  text: string;
  task: string;
  mode: Mode;
  /** The only answers this item accepts, in display order. */
  choices: string[];
  /** Blinded candidate labels, adjudicate mode only. */
  label_a?: string;
  label_b?: string;
}

export interface QueueDepth {
  answered: number;
  remaining: number;
}

export interface Metrics {
  queue: {
    label: Record<string, QueueDepth>;
    adjudicate: Record<string, QueueDepth>;
  };
  annotations: number;
  adjudications: number;
  parity?: { overall_match: number; task_macro_match: number };
  gold_accuracy?: { macro: number; per_task: Record<string, number> };
  round?: RoundStatus;
}

export interface RoundStatus {
  round_id: string;
  status: "running" | "done" | "failed";
  error?: string;
  comparison?: unknown;
}

/** The 14 task ids, canonical order (mirrors the server). */
export const TASKS = [
  "no_finding",
  "enlarged_cardiomediastinum",
  "cardiomegaly",
  "lung_lesion",
  "airspace_opacity",
  "edema",
  "consolidation",
  "pneumonia",
  "atelectasis",
  "pneumothorax",
  "pleural_effusion",
  "pleural_other",
  "fracture",
  "support_devices",
] as const;
