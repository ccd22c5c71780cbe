/**
 * A/B report view: group CTRs, relative gain, significance badge and a
 * CTR-over-time chart built from the report's sample points.
 */

import { AbReport, ReportSample } from "./api.js";
import { formatCtr, formatNumber, formatPercent, pBadge } from "./format.js";

export interface ChartPoint {
  x: number;
  y: number;
}

/**
 * Map report samples into SVG coordinates. Pure: the same samples and
 * canvas always give the same polyline points.
 */
export function chartPoints(
  samples: ReportSample[],
  series: "ctr_bandit" | "ctr_control",
  width: number,
  height: number,
): ChartPoint[] {
  const valued = samples.filter((s) => s[series] !== null);
  if (valued.length === 0) return [];
  const maxN = Math.max(...valued.map((s) => s.n));
  const maxY = Math.max(
    ...samples.flatMap((s) => [s.ctr_bandit ?? 0, s.ctr_control ?? 0]),
    1e-9,
  );
  return valued.map((s) => ({
    x: (s.n / maxN) * width,
    y: height - ((s[series] as number) / maxY) * height,
  }));
}

function polyline(points: ChartPoint[], stroke: string): SVGPolylineElement {
  const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
  line.setAttribute("fill", "none");
  line.setAttribute("stroke", stroke);
  line.setAttribute("stroke-width", "2");
  line.setAttribute("points", points.map((p) => `${p.x.toFixed(1)},${p.y.toFixed(1)}`).join(" "));
  return line;
}

export function renderReport(container: HTMLElement, report: AbReport): void {
  container.textContent = "";

  const badge = pBadge(report.p);
  const header = document.createElement("p");
  header.className = "report-header";
  const gain = document.createElement("strong");
  gain.id = "relative-gain";
  gain.textContent = `gain ${formatPercent(report.relative_gain)}`;
  header.appendChild(gain);
  header.appendChild(document.createTextNode(` · z ${formatNumber(report.z)} · `));
  const badgeEl = document.createElement("span");
  badgeEl.className = badge.className;
  badgeEl.textContent = badge.label;
  header.appendChild(badgeEl);
  container.appendChild(header);

  const table = document.createElement("table");
  const head = document.createElement("tr");
  for (const title of ["group", "impressions", "clicks", "CTR"]) {
    const th = document.createElement("th");
    th.textContent = title;
    head.appendChild(th);
  }
  table.appendChild(head);
  for (const [name, group] of Object.entries(report.groups)) {
    const tr = document.createElement("tr");
    tr.dataset.group = name;
    for (const text of [
      name,
      String(group.impressions),
      String(group.clicks),
      formatCtr(group.ctr),
    ]) {
      const td = document.createElement("td");
      td.textContent = text;
      tr.appendChild(td);
    }
    table.appendChild(tr);
  }
  container.appendChild(table);

  if (report.samples.length > 0) {
    const width = 560;
    const height = 180;
    const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
    svg.setAttribute("class", "lift-chart");
    svg.appendChild(polyline(chartPoints(report.samples, "ctr_bandit", width, height), "#2a6fdb"));
    svg.appendChild(polyline(chartPoints(report.samples, "ctr_control", width, height), "#999999"));
    container.appendChild(svg);
    const legend = document.createElement("p");
    legend.className = "meta";
    legend.textContent = "blue: bandit · grey: random control (cumulative CTR over impressions)";
    container.appendChild(legend);
  }
}
