/**
 * Bandit dashboard: per-category, per-prompt pulls, estimated CTR and
 * confidence trace, rendered verbatim from /v1/bandit/stats.
 */

import { ArmStats, BanditStats } from "./api.js";
import { formatNumber } from "./format.js";

export interface DashboardRow {
  category: string;
  promptId: string;
  promptText: string;
  pulls: number;
  estimate: number | null;
  traceA: number;
}

/** Flatten the stats payload into rows grouped by category. */
export function dashboardRows(stats: BanditStats): DashboardRow[] {
  const rows: DashboardRow[] = Object.entries(stats.arms).map(
    ([promptId, arm]: [string, ArmStats]) => ({
      category: arm.category_id ?? "unknown",
      promptId,
      promptText: arm.prompt_text ?? "",
      pulls: arm.pulls,
      estimate: arm.mean_reward_estimate,
      traceA: arm.trace_a,
    }),
  );
  rows.sort((a, b) =>
    a.category === b.category
      ? a.promptId.localeCompare(b.promptId)
      : a.category.localeCompare(b.category),
  );
  return rows;
}

export function totalPulls(stats: BanditStats): number {
  return Object.values(stats.arms).reduce((acc, arm) => acc + arm.pulls, 0);
}

export function renderDashboard(container: HTMLElement, stats: BanditStats): void {
  container.textContent = "";
  const summary = document.createElement("p");
  summary.className = "meta";
  summary.id = "dashboard-totals";
  summary.dataset.totalPulls = String(stats.total_pulls);
  summary.textContent =
    `alpha ${stats.alpha} · d ${stats.d} · total pulls ${stats.total_pulls}`;
  container.appendChild(summary);

  const table = document.createElement("table");
  const head = document.createElement("tr");
  for (const title of ["category", "prompt", "pulls", "est. CTR", "trace(A)"]) {
    const th = document.createElement("th");
    th.textContent = title;
    head.appendChild(th);
  }
  table.appendChild(head);

  for (const row of dashboardRows(stats)) {
    const tr = document.createElement("tr");
    tr.dataset.promptId = row.promptId;
    const cells = [
      row.category,
      `${row.promptId} — ${row.promptText}`,
      String(row.pulls),
      formatNumber(row.estimate, 4),
      formatNumber(row.traceA, 1),
    ];
    for (const [i, text] of cells.entries()) {
      const td = document.createElement("td");
      td.textContent = text;
      if (i === 2) td.className = "pulls";
      tr.appendChild(td);
    }
    table.appendChild(tr);
  }
  container.appendChild(table);
}
