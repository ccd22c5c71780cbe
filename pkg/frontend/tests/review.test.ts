import { describe, expect, it, vi } from "vitest";

import { ApiClient, ReviewItem } from "../src/api.js";
import { renderReviewGrid, ReviewQueue } from "../src/review.js";

function makeItem(overrides: Partial<ReviewItem> = {}): ReviewItem {
  return {
    image_hash: "a".repeat(64),
    prompt_id: "apparel-studio",
    bucket: 1,
    status: "Ready",
    created_ts: 1000,
    updated_ts: 1010,
    attempts: 1,
    failure_reason: null,
    prompt_text: "soft studio light",
    creative_ref: "/v1/images/ref1",
    original_ref: "/v1/images/orig1",
    ...overrides,
  };
}

function queueWith(items: ReviewItem[], apiOverrides: Partial<ApiClient> = {}) {
  const errors: string[] = [];
  const api = Object.assign(new ApiClient(), apiOverrides);
  const queue = new ReviewQueue(api, (msg) => errors.push(msg));
  queue.items = items;
  return { queue, api, errors };
}

describe("ReviewQueue", () => {
  it("reject removes the item optimistically and keeps it on success", async () => {
    const item = makeItem();
    const { queue, errors } = queueWith([item], {
      reviewAction: vi.fn(async () => ({
        image_hash: item.image_hash, prompt_id: item.prompt_id, bucket: item.bucket,
        status: "Rejected", approved: false,
      })),
    } as any);
    const ok = await queue.act(item, "reject");
    expect(ok).toBe(true);
    expect(queue.items).toEqual([]);
    expect(errors).toEqual([]);
  });

  it("rolls back and reports on server error", async () => {
    const item = makeItem();
    const { queue, errors } = queueWith([item], {
      reviewAction: vi.fn(async () => {
        throw new Error("boom");
      }),
    } as any);
    const ok = await queue.act(item, "reject");
    expect(ok).toBe(false);
    expect(queue.items).toEqual([item]);  // state rollback
    expect(errors).toHaveLength(1);
    expect(errors[0]).toContain("boom");
  });

  it("regenerate flips the badge to Queued", async () => {
    const item = makeItem({ status: "Failed", creative_ref: null });
    const { queue } = queueWith([item], {
      reviewAction: vi.fn(async () => ({
        image_hash: item.image_hash, prompt_id: item.prompt_id, bucket: item.bucket,
        status: "Queued", approved: false,
      })),
    } as any);
    await queue.act(item, "regenerate");
    expect(queue.items[0].status).toBe("Queued");
  });

  it("ignores a second click while the first is in flight", async () => {
    const item = makeItem();
    let resolve!: (v: unknown) => void;
    const pending = new Promise((r) => (resolve = r));
    const action = vi.fn(() => pending);
    const { queue } = queueWith([item], { reviewAction: action } as any);
    const first = queue.act(item, "reject");
    const second = await queue.act(item, "reject");
    expect(second).toBe(false);
    resolve({ status: "Rejected" });
    await first;
    expect(action).toHaveBeenCalledTimes(1);
  });
});

describe("renderReviewGrid", () => {
  it("renders cards with previews and legal actions only", () => {
    const ready = makeItem();
    const failed = makeItem({
      image_hash: "b".repeat(64), status: "Failed", creative_ref: null,
      failure_reason: "EmptyMask: no product pixels",
    });
    const { queue, api } = queueWith([ready, failed]);
    const container = document.createElement("div");
    renderReviewGrid(container, queue, api, () => undefined);

    const cards = container.querySelectorAll(".review-card");
    expect(cards).toHaveLength(2);
    const readyActions = Array.from(cards[0].querySelectorAll("button")).map(
      (b) => b.dataset.action,
    );
    expect(readyActions).toEqual(["approve", "reject"]);
    const failedActions = Array.from(cards[1].querySelectorAll("button")).map(
      (b) => b.dataset.action,
    );
    expect(failedActions).toEqual(["regenerate"]);
    expect(cards[0].querySelectorAll("img")).toHaveLength(2);
    expect(cards[1].querySelectorAll("img")).toHaveLength(1); // no creative for Failed
    expect(cards[1].textContent).toContain("EmptyMask");
  });

  it("invokes the action callback from buttons", () => {
    const item = makeItem();
    const { queue, api } = queueWith([item]);
    const container = document.createElement("div");
    const seen: string[] = [];
    renderReviewGrid(container, queue, api, (_i, action) => seen.push(action));
    (container.querySelector('button[data-action="reject"]') as HTMLButtonElement).click();
    expect(seen).toEqual(["reject"]);
  });

  it("shows an empty message when nothing is pending", () => {
    const { queue, api } = queueWith([]);
    const container = document.createElement("div");
    renderReviewGrid(container, queue, api, () => undefined);
    expect(container.textContent).toContain("Nothing awaiting review");
  });
});
