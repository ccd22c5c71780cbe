/** Display formatting; values always come straight from API payloads. */

export function formatPercent(value: number | null): string {
  if (value === null || !isFinite(value)) return "n/a";
  const sign = value >= 0 ? "+" : "";
  return `${sign}${(value * 100).toFixed(1)}%`;
}

export function formatCtr(value: number | null): string {
  if (value === null || !isFinite(value)) return "n/a";
  return `${(value * 100).toFixed(2)}%`;
}

export function formatNumber(value: number | null, digits = 3): string {
  if (value === null || !isFinite(value)) return "n/a";
  return value.toFixed(digits);
}

export interface Badge {
  label: string;
  className: string;
}

/** Green badge when the reported p-value clears 0.05, neutral otherwise. */
export function pBadge(p: number | null): Badge {
  if (p === null) return { label: "p n/a", className: "badge neutral" };
  const label = `p=${p < 0.001 ? p.toExponential(1) : p.toFixed(3)}`;
  return p < 0.05
    ? { label: `${label} significant`, className: "badge significant" }
    : { label, className: "badge neutral" };
}

export function statusBadgeClass(status: string): string {
  switch (status) {
    case "Ready":
      return "badge ready";
    case "Failed":
      return "badge failed";
    case "Queued":
      return "badge queued";
    case "Rejected":
      return "badge rejected";
    default:
      return "badge neutral";
  }
}

export function formatTimestamp(ts: number): string {
  return new Date(ts * 1000).toISOString().replace("T", " ").slice(0, 19);
}
