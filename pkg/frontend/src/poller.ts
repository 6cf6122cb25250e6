// Inbox polling: pull pending queries plus the budget on a fixed interval,
// surface connection failures as a banner state, keep retrying.

import { ServiceClient, type BudgetView, type PendingQuery } from "./api.js";
import { buildQueryCards, type QueryCard } from "./model.js";

export interface InboxUpdate {
  connected: boolean;
  cards: QueryCard[];
  budget: BudgetView | null;
}

export type InboxListener = (update: InboxUpdate) => void;

export class InboxPoller {
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private client: ServiceClient,
    private runId: string,
    private listener: InboxListener,
    private intervalMs = 2000,
  ) {}

  async tick(): Promise<InboxUpdate> {
    let update: InboxUpdate;
    try {
      const [pending, budget] = await Promise.all([
        this.client.pendingQueries(this.runId),
        this.client.budget(this.runId),
      ]);
      update = { connected: true, cards: buildQueryCards(pending, budget), budget };
    } catch {
      update = { connected: false, cards: [], budget: null };
    }
    this.listener(update);
    return update;
  }

  start(): void {
    if (this.timer) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.intervalMs);
  }

  stop(): void {
    if (this.timer) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  /** Poll until a pending query shows up or `polls` intervals have elapsed. */
  async waitForCards(polls: number): Promise<QueryCard[]> {
    for (let i = 0; i < polls; i += 1) {
      const update = await this.tick();
      if (update.cards.length > 0) return update.cards;
      await new Promise((resolve) => setTimeout(resolve, this.intervalMs));
    }
    return [];
  }
}

export function resolvePendingQuery(pending: PendingQuery[], qid: string): PendingQuery | undefined {
  return pending.find((entry) => entry.query.qid === qid);
}
