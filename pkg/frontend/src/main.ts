/** Bootstrap: one annotator session plus the metrics dashboard. */

import { ApiClient } from "./api.js";
import { Dashboard } from "./dashboard.js";
import { AnnotationSession } from "./session.js";
import {
  bindKeyboard,
  renderBanner,
  renderDashboard,
  renderItem,
  renderSessionControls,
} from "./views.js";

function annotatorId(): string {
  const stored = window.localStorage.getItem("annotator_id");
  if (stored) return stored;
  const fresh = window.prompt("Annotator id?", "annotator-1") || "annotator-1";
  window.localStorage.setItem("annotator_id", fresh);
  return fresh;
}

function start(): void {
  const api = new ApiClient("");
  const session = new AnnotationSession(api, annotatorId());
  const dashboard = new Dashboard(api);

  const main = document.getElementById("main");
  const side = document.getElementById("side");
  if (!main || !side) throw new Error("index.html is missing #main / #side");

  const redrawSession = () => {
    const state = session.snapshot();
    main.replaceChildren();
    main.append(renderSessionControls(state, session));
    const banner = renderBanner(state);
    if (banner) main.append(banner);
    main.append(renderItem(state, session));
  };
  session.onChange(redrawSession);

  const redrawDashboard = () => {
    side.replaceChildren(renderDashboard(dashboard.snapshot(), dashboard));
  };
  dashboard.onChange(redrawDashboard);

  bindKeyboard(session);
  redrawSession();
  redrawDashboard();
  void session.loadNext();
  dashboard.startPolling();
}

start();
