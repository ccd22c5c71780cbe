/**
 * Console entry point: tab wiring and the 5-second polling loop.
 * Service base URL comes from the ?api= query parameter and defaults
 * to the page's own origin (the service can host the console bundle).
 */

import { ApiClient, ReviewAction, ReviewItem } from "./api.js";
import { renderDashboard } from "./dashboard.js";
import { renderReport } from "./report.js";
import { renderReviewGrid, ReviewQueue } from "./review.js";

const POLL_INTERVAL_MS = 5000;

function toast(message: string): void {
  const el = document.getElementById("toast");
  if (!el) return;
  el.textContent = message;
  el.classList.add("visible");
  setTimeout(() => el.classList.remove("visible"), 4000);
}

export function startConsole(root: Document = document): () => void {
  const params = new URLSearchParams(root.location?.search ?? "");
  const api = new ApiClient(params.get("api") ?? "");
  const queue = new ReviewQueue(api, toast);

  const reviewPane = root.getElementById("review-pane") as HTMLElement;
  const dashboardPane = root.getElementById("dashboard-pane") as HTMLElement;
  const reportPane = root.getElementById("report-pane") as HTMLElement;

  const onAction = async (item: ReviewItem, action: ReviewAction) => {
    renderReviewGrid(reviewPane, queue, api, onAction); // optimistic state
    await queue.act(item, action);
    renderReviewGrid(reviewPane, queue, api, onAction);
  };

  const refresh = async () => {
    try {
      await queue.load();
      renderReviewGrid(reviewPane, queue, api, onAction);
      renderDashboard(dashboardPane, await api.banditStats());
      renderReport(reportPane, await api.abReport());
      root.getElementById("connection")?.classList.remove("offline");
    } catch (err) {
      root.getElementById("connection")?.classList.add("offline");
      toast(`refresh failed: ${err instanceof Error ? err.message : err}`);
    }
  };

  for (const button of Array.from(root.querySelectorAll<HTMLElement>("[data-tab]"))) {
    button.addEventListener("click", () => {
      for (const pane of Array.from(root.querySelectorAll<HTMLElement>(".pane"))) {
        pane.hidden = pane.id !== button.dataset.tab;
      }
      for (const other of Array.from(root.querySelectorAll<HTMLElement>("[data-tab]"))) {
        other.classList.toggle("active", other === button);
      }
    });
  }

  void refresh();
  const timer = setInterval(refresh, POLL_INTERVAL_MS);
  return () => clearInterval(timer);
}

if (typeof window !== "undefined" && document.getElementById("review-pane")) {
  window.addEventListener("load", () => startConsole());
}
