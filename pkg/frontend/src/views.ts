/**
 * DOM rendering. Views are pure functions of state; main.ts re-renders on
 * every state change. Keyboard digits 1..n answer with the nth choice of
 * whatever choice set the server declared for the current item.
 */

import type { AnnotationSession, SessionState } from "./session.js";
import type { Dashboard, DashboardState } from "./dashboard.js";
import { TASKS } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function prettyTask(task: string): string {
  return task.replace(/_/g, " ");
}

function prettyChoice(choice: string): string {
  return choice.replace(/_/g, " ");
}

export function renderBanner(state: SessionState): HTMLElement | null {
  if (!state.banner) return null;
  return el("div", `banner banner-${state.banner.kind}`, state.banner.message);
}

export function renderItem(state: SessionState, session: AnnotationSession): HTMLElement {
  const root = el("section", "item-card");
  const item = state.current;
  if (state.done || item === null) {
    root.append(el("p", "all-done", "Queue drained. Nothing left to annotate here."));
    return root;
  }

  const header = el("div", "item-header");
  header.append(el("span", "item-task", prettyTask(item.task)));
  header.append(el("span", "item-mode", item.mode));
  root.append(header);
  root.append(el("p", "item-text", item.text));

  if (item.mode === "adjudicate") {
    const pair = el("div", "blinded-pair");
    pair.append(el("div", "blinded-label", `A: ${prettyChoice(item.label_a ?? "")}`));
    pair.append(el("div", "blinded-label", `B: ${prettyChoice(item.label_b ?? "")}`));
    root.append(pair);
  }

  const choices = el("div", "choices");
  item.choices.forEach((choice, index) => {
    const button = el("button", "choice-button");
    button.append(el("kbd", "choice-key", String(index + 1)));
    button.append(el("span", "choice-text", prettyChoice(choice)));
    button.addEventListener("click", () => void session.submit(choice));
    choices.append(button);
  });
  root.append(choices);
  return root;
}

export function renderSessionControls(state: SessionState, session: AnnotationSession): HTMLElement {
  const bar = el("div", "controls");

  const modeSelect = el("select", "mode-select");
  for (const mode of ["label", "adjudicate"] as const) {
    const option = el("option", undefined, mode);
    option.value = mode;
    option.selected = state.mode === mode;
    modeSelect.append(option);
  }
  modeSelect.addEventListener("change", () => void session.setMode(modeSelect.value as "label" | "adjudicate"));
  bar.append(modeSelect);

  const taskSelect = el("select", "task-select");
  const anyOption = el("option", undefined, "all tasks");
  anyOption.value = "";
  taskSelect.append(anyOption);
  for (const task of TASKS) {
    const option = el("option", undefined, prettyTask(task));
    option.value = task;
    option.selected = state.taskFilter === task;
    taskSelect.append(option);
  }
  taskSelect.addEventListener("change", () => void session.setTaskFilter(taskSelect.value || null));
  bar.append(taskSelect);

  bar.append(el("span", "session-count", `${state.answeredThisSession} answered this session`));
  return bar;
}

export function renderDashboard(state: DashboardState, dashboard: Dashboard): HTMLElement {
  const root = el("aside", "dashboard");
  root.append(el("h2", undefined, "Progress"));

  if (state.offline) {
    root.append(el("div", "banner banner-error", "Server unreachable; showing last known state."));
  }
  const metrics = state.metrics;
  if (!metrics) {
    root.append(el("p", "dashboard-empty", "No metrics yet."));
    return root;
  }

  const table = el("table", "depth-table");
  const head = el("tr");
  for (const title of ["task", "answered", "remaining"]) head.append(el("th", undefined, title));
  table.append(head);
  const depths = metrics.queue.label;
  for (const task of Object.keys(depths)) {
    const row = el("tr");
    row.append(el("td", undefined, prettyTask(task)));
    row.append(el("td", "num", String(depths[task].answered)));
    row.append(el("td", "num", String(depths[task].remaining)));
    table.append(row);
  }
  root.append(table);

  root.append(el("p", "totals",
    `${metrics.annotations} annotations, ${metrics.adjudications} adjudications`));

  if (metrics.gold_accuracy) {
    root.append(el("p", "gold", `Gold accuracy (macro): ${(100 * metrics.gold_accuracy.macro).toFixed(1)}%`));
  }
  if (metrics.parity) {
    root.append(el("p", "parity", `Student/teacher parity: ${(100 * metrics.parity.overall_match).toFixed(2)}%`));
  }

  const roundButton = el("button", "round-button", state.roundRunning ? "round running..." : "start fine-tune round");
  roundButton.disabled = state.roundRunning;
  roundButton.addEventListener("click", () => {
    if (window.confirm("Fine-tune the model on the collected annotations now?")) {
      void dashboard.triggerRound();
    }
  });
  root.append(roundButton);
  if (metrics.round?.status === "failed") {
    root.append(el("div", "banner banner-error", `Round failed: ${metrics.round.error ?? "unknown error"}`));
  }
  return root;
}

export function bindKeyboard(session: AnnotationSession): void {
  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement || event.target instanceof HTMLSelectElement) return;
    const digit = Number.parseInt(event.key, 10);
    if (Number.isNaN(digit)) return;
    const choice = session.choiceForKey(digit);
    if (choice) {
      event.preventDefault();
      void session.submit(choice);
    }
  });
}
