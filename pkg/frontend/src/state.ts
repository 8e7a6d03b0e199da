import { ApiError, ReviewClient } from "./api.js";
import type { DecisionRequest, Metrics, ReviewItem } from "./types.js";

export interface ControllerState {
  items: ReviewItem[];
  selectedId: string | null;
  metrics: Metrics | null;
  /** Agreement flag of the most recent successful decision. */
  lastAgreement: boolean | null;
  /** One-line status for the header bar. */
  notice: string;
  loading: boolean;
}

export type Listener = (state: ControllerState) => void;

/**
 * Drives the review workflow: load the pending queue, pick an item,
 * submit exactly one decision, and keep the metrics panel in sync.
 *
 * A 409 on submit means another reviewer got there first; the item is
 * gone from the queue either way, so the controller refreshes and moves
 * on rather than treating it as a failure.
 */
export class ReviewController {
  readonly state: ControllerState = {
    items: [],
    selectedId: null,
    metrics: null,
    lastAgreement: null,
    notice: "",
    loading: false,
  };

  private readonly listeners: Listener[] = [];

  constructor(
    private readonly client: ReviewClient,
    private readonly reviewer: string,
  ) {
    if (!reviewer.trim()) {
      throw new Error("reviewer must be non-empty");
    }
  }

  onChange(listener: Listener): void {
    this.listeners.push(listener);
  }

  selected(): ReviewItem | null {
    return this.state.items.find((i) => i.item_id === this.state.selectedId) ?? null;
  }

  async refresh(): Promise<void> {
    this.state.loading = true;
    this.emit();
    try {
      const [queue, metrics] = await Promise.all([
        this.client.queue(),
        this.client.metrics(),
      ]);
      this.state.items = queue.items;
      this.state.metrics = metrics;
      const stillPending = queue.items.some((i) => i.item_id === this.state.selectedId);
      if (!stillPending) {
        this.state.selectedId = queue.items[0]?.item_id ?? null;
      }
    } finally {
      this.state.loading = false;
    }
    this.emit();
  }

  select(itemId: string): void {
    if (this.state.items.some((i) => i.item_id === itemId)) {
      this.state.selectedId = itemId;
      this.emit();
    }
  }

  /** Accept one of the engine's candidates. */
  choose(itemId: string, annotationId: string): Promise<boolean | null> {
    return this.submit(itemId, { reviewer: this.reviewer, chosen_id: annotationId });
  }

  /** Pick a catalog entry the engine did not surface. */
  override(itemId: string, annotationId: string): Promise<boolean | null> {
    return this.submit(itemId, { reviewer: this.reviewer, override_id: annotationId });
  }

  /** Mark every candidate wrong. */
  rejectAll(itemId: string): Promise<boolean | null> {
    return this.submit(itemId, { reviewer: this.reviewer, reject_all: true });
  }

  private async submit(
    itemId: string,
    body: DecisionRequest,
  ): Promise<boolean | null> {
    try {
      const result = await this.client.decide(itemId, body);
      this.state.lastAgreement = result.agreement;
      this.state.notice = result.agreement
        ? "decision saved; matched the top suggestion"
        : "decision saved";
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.state.lastAgreement = null;
        this.state.notice = "already decided elsewhere; queue refreshed";
      } else {
        throw err;
      }
    }
    await this.refresh();
    return this.state.lastAgreement;
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }
}
