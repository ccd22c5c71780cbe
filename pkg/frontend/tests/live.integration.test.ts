// @vitest-environment node
/**
 * Drives a real service instance through the console's own API client:
 * rejecting a creative removes it from the queue and later requests for
 * that key serve the original; dashboard pull counts equal the raw
 * /v1/bandit/stats payload.
 */

import { ChildProcess, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { dashboardRows, totalPulls } from "../src/dashboard.js";

const PORT = 8490 + Math.floor(Math.random() * 400);
const BASE = `http://127.0.0.1:${PORT}`;

// 48x48 opaque white PNG with a red product square
const PRODUCT_B64 =
  "iVBORw0KGgoAAAANSUhEUgAAADAAAAAwCAYAAABXAvmHAAAAbElEQVR4nO3ZsQkAIAwAQRWXcQL3L53A" +
  "ceIANoLII/zVKfKkTI6ISB8r9AK3DKAZQDOAZgCtng6O1l7uselzHs19fwEDaAbQDKAZQDOAZgDNAJoB" +
  "NANoBtAMoBlAM4CW/VLCDKAZQDOAZgBtAfN1C1kJTSgdAAAAAElFTkSuQmCC";

function creativeBody(user = "console-user") {
  return {
    product: { id: "sku-1", category: "apparel", image_b64: PRODUCT_B64 },
    placement: { id: "mrec", width: 300, height: 250 },
    user: { user_id: user, features: { device: "mobile" } },
    ab_override: "bandit",
  };
}

async function sleep(ms: number) {
  return new Promise((r) => setTimeout(r, ms));
}

describe("console against a live service", () => {
  let child: ChildProcess;
  let dataDir: string;
  const api = new ApiClient(BASE);

  beforeAll(async () => {
    dataDir = mkdtempSync(join(tmpdir(), "creativegen-console-"));
    child = spawn(
      "python3",
      ["-m", "creativegen.cli", "serve", "--port", String(PORT)],
      {
        env: {
          ...process.env,
          CREATIVEGEN_DATA_DIR: dataDir,
          CREATIVEGEN_WORKER_POLL_S: "0.02",
          CREATIVEGEN_CALLBACK_BACKOFF_S: "0",
        },
        stdio: ["ignore", "pipe", "pipe"],
      },
    );
    const stderr: string[] = [];
    child.stderr?.on("data", (chunk) => stderr.push(String(chunk)));
    for (let i = 0; i < 200; i++) {
      try {
        const health = await api.health();
        if (health.status === "ok") return;
      } catch {
        await sleep(250);
      }
    }
    throw new Error(`service did not come up:\n${stderr.join("")}`);
  });

  afterAll(async () => {
    child?.kill("SIGTERM");
    await sleep(500);
    child?.kill("SIGKILL");
    rmSync(dataDir, { recursive: true, force: true });
  });

  it("reject removes the item and the key reverts to the original image", async () => {
    // cold request enqueues and serves the original
    const first = await api.requestCreative(creativeBody());
    expect(first.variant).toBe("original");
    expect(first.prompt_id).toBeDefined();
    await api.feedback(first.request_id, "impression");

    // wait for the background worker, then the same key is a cache hit
    let warm = first;
    for (let i = 0; i < 120 && warm.variant !== "generated"; i++) {
      await sleep(250);
      warm = await api.requestCreative(creativeBody());
    }
    expect(warm.variant).toBe("generated");
    expect(warm.image_ref).toContain("/v1/images/");

    // the creative shows up in the review queue
    const pending = await api.pendingReviews();
    expect(pending).toHaveLength(1);
    const item = pending[0];
    expect(item.status).toBe("Ready");
    expect(item.prompt_id).toBe(warm.prompt_id);

    // reject through the console client: queue empties...
    const result = await api.reviewAction(item, "reject");
    expect(result.status).toBe("Rejected");
    expect(await api.pendingReviews()).toHaveLength(0);

    // ...and subsequent requests for that key serve the original again
    const after = await api.requestCreative(creativeBody());
    expect(after.variant).toBe("original");
    expect(after.prompt_id).toBeUndefined();
  });

  it("dashboard pull counts equal the raw stats payload", async () => {
    // a click inside the window trains the bandit exactly once
    const resp = await api.requestCreative(creativeBody("clicker"));
    await api.feedback(resp.request_id, "impression");
    await api.feedback(resp.request_id, "click");

    const stats = await api.banditStats();
    expect(stats.total_pulls).toBeGreaterThanOrEqual(1);
    const rows = dashboardRows(stats);
    const renderedTotal = rows.reduce((acc, r) => acc + r.pulls, 0);
    expect(renderedTotal).toBe(stats.total_pulls);
    expect(totalPulls(stats)).toBe(stats.total_pulls);
    for (const row of rows) {
      expect(row.pulls).toBe(stats.arms[row.promptId].pulls);
    }

    const report = await api.abReport();
    expect(report.groups.bandit.impressions).toBeGreaterThanOrEqual(2);
  });
});
