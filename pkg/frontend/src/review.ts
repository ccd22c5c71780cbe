/**
 * Review queue: Ready and Failed creatives awaiting a human decision.
 *
 * Mutations are optimistic: the item's state changes locally the moment
 * the button is pressed and rolls back if the server refuses. Actions
 * are idempotent against the API, so a double click is safe.
 */

import { ApiClient, ReviewAction, ReviewItem } from "./api.js";
import { formatTimestamp, statusBadgeClass } from "./format.js";

export type ErrorHandler = (message: string) => void;

export class ReviewQueue {
  items: ReviewItem[] = [];
  busy = new Set<string>();

  constructor(
    private readonly api: ApiClient,
    private readonly onError: ErrorHandler = () => undefined,
  ) {}

  itemKey(item: Pick<ReviewItem, "image_hash" | "prompt_id" | "bucket">): string {
    return `${item.image_hash}:${item.prompt_id}:${item.bucket}`;
  }

  async load(limit = 50): Promise<ReviewItem[]> {
    this.items = await this.api.pendingReviews(limit);
    return this.items;
  }

  /**
   * Apply one review action optimistically. Approve and reject remove
   * the item from the queue; regenerate flips its badge to Queued (it
   * drops off on the next poll). On a server error the previous state
   * is restored and the error surfaced via onError.
   */
  async act(item: ReviewItem, action: ReviewAction): Promise<boolean> {
    const key = this.itemKey(item);
    if (this.busy.has(key)) return false;
    this.busy.add(key);
    const snapshot = this.items.slice();
    if (action === "regenerate") {
      this.items = this.items.map((i) =>
        this.itemKey(i) === key ? { ...i, status: "Queued" } : i,
      );
    } else {
      this.items = this.items.filter((i) => this.itemKey(i) !== key);
    }
    try {
      await this.api.reviewAction(item, action);
      return true;
    } catch (err) {
      this.items = snapshot;
      this.onError(`${action} failed: ${err instanceof Error ? err.message : err}`);
      return false;
    } finally {
      this.busy.delete(key);
    }
  }
}

export function renderReviewGrid(
  container: HTMLElement,
  queue: ReviewQueue,
  api: ApiClient,
  onAction: (item: ReviewItem, action: ReviewAction) => void,
): void {
  container.textContent = "";
  if (queue.items.length === 0) {
    const empty = document.createElement("p");
    empty.className = "empty";
    empty.textContent = "Nothing awaiting review.";
    container.appendChild(empty);
    return;
  }
  for (const item of queue.items) {
    const card = document.createElement("div");
    card.className = "card review-card";
    card.dataset.key = queue.itemKey(item);

    const badge = document.createElement("span");
    badge.className = statusBadgeClass(item.status);
    badge.textContent = item.status;
    card.appendChild(badge);

    const previews = document.createElement("div");
    previews.className = "previews";
    for (const [label, ref] of [
      ["original", item.original_ref],
      ["generated", item.creative_ref],
    ] as const) {
      const cell = document.createElement("figure");
      const url = api.imageUrl(ref);
      if (url) {
        const img = document.createElement("img");
        img.src = url;
        img.alt = label;
        cell.appendChild(img);
      } else {
        const missing = document.createElement("div");
        missing.className = "missing";
        missing.textContent = "no image";
        cell.appendChild(missing);
      }
      const caption = document.createElement("figcaption");
      caption.textContent = label;
      cell.appendChild(caption);
      previews.appendChild(cell);
    }
    card.appendChild(previews);

    const meta = document.createElement("p");
    meta.className = "meta";
    meta.textContent =
      `${item.prompt_id} · ${item.prompt_text ?? ""} · ` +
      `updated ${formatTimestamp(item.updated_ts)}` +
      (item.failure_reason ? ` · ${item.failure_reason}` : "");
    card.appendChild(meta);

    const actions = document.createElement("div");
    actions.className = "actions";
    // legal transitions only: Ready can be approved or retracted,
    // Failed (and retracted) creatives can be regenerated
    const available: ReviewAction[] =
      item.status === "Ready" ? ["approve", "reject"] : ["regenerate"];
    for (const action of available) {
      const button = document.createElement("button");
      button.textContent = action === "reject" ? "retract" : action;
      button.dataset.action = action;
      button.addEventListener("click", () => onAction(item, action));
      actions.appendChild(button);
    }
    card.appendChild(actions);
    container.appendChild(card);
  }
}
