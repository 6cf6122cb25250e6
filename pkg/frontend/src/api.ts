// Typed client over the expertloop service API. The console holds no business
// logic: every state change goes through these calls and every displayed
// number comes back from the server.

export interface ServiceConfig {
  baseUrl: string;
  token?: string;
}

export interface RunSnapshot {
  run_id: string;
  status: "idle" | "running" | "waiting_human" | "finished" | "error";
  processed: number;
  total: number;
  budget: { total: number; spent: number; remaining: number };
  pending_queries: number;
  error: string | null;
}

export interface ConflictPair {
  old_ref: string;
  new_ref: string;
  old_text: string;
  new_text: string;
  question: string;
}

export interface PendingQuery {
  query: {
    qid: string;
    kind: "AskLabel" | "AskExplanation" | "AskRules" | "AskClarification";
    cost: number;
    issued_at: number;
    payload: {
      instance_id: string;
      preliminary: string;
      dialogue_rendered: string;
      conflict: ConflictPair | null;
      question: string;
    };
  };
  instance_snapshot: Record<string, unknown>;
  dialogue_snapshot: string;
  enqueued_at: number;
  status: "pending" | "answered" | "expired";
}

export interface BudgetView {
  run_id: string;
  total: number;
  spent: number;
  remaining: number;
  entries: { qid: string; kind: string; cost: number; ts: number }[];
}

export interface KnowledgeItemView {
  kid: string;
  content: { kind: string; text: string };
  ts_added: number;
  ts_validated: number;
  status: "Valid" | "PotentiallyOutdated" | "Superseded";
  meta: { source: string; usage_count: number; superseded_by: string | null; links: string[] };
}

export type AnswerResult = { ok: true } | { ok: false; conflict: boolean; detail: string };

export class ServiceClient {
  constructor(private config: ServiceConfig) {}

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.config.token) headers["X-Auth-Token"] = this.config.token;
    return headers;
  }

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(`${this.config.baseUrl}${path}`, { headers: this.headers() });
    if (!response.ok) throw new Error(`GET ${path} -> ${response.status}`);
    return (await response.json()) as T;
  }

  async health(): Promise<boolean> {
    try {
      const response = await fetch(`${this.config.baseUrl}/healthz`);
      return response.ok;
    } catch {
      return false;
    }
  }

  createRun(config: Record<string, unknown>): Promise<RunSnapshot> {
    return this.post<RunSnapshot>("/runs", config);
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await fetch(`${this.config.baseUrl}${path}`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(body),
    });
    if (!response.ok) throw new Error(`POST ${path} -> ${response.status}`);
    return (await response.json()) as T;
  }

  advance(runId: string, steps: number, wait = false): Promise<RunSnapshot> {
    return this.post<RunSnapshot>(`/runs/${runId}/advance?steps=${steps}&wait=${wait}`, {});
  }

  run(runId: string): Promise<RunSnapshot> {
    return this.get<RunSnapshot>(`/runs/${runId}`);
  }

  budget(runId: string): Promise<BudgetView> {
    return this.get<BudgetView>(`/runs/${runId}/budget`);
  }

  pendingQueries(runId: string): Promise<PendingQuery[]> {
    return this.get<{ pending: PendingQuery[] }>(`/runs/${runId}/queries/pending`).then(
      (body) => body.pending,
    );
  }

  krItems(runId: string, status?: string, q?: string): Promise<KnowledgeItemView[]> {
    const params = new URLSearchParams();
    if (status) params.set("status", status);
    if (q) params.set("q", q);
    const suffix = params.toString() ? `?${params}` : "";
    return this.get<{ items: KnowledgeItemView[] }>(`/kr/${runId}/items${suffix}`).then(
      (body) => body.items,
    );
  }

  krItem(
    runId: string,
    kid: string,
  ): Promise<{ item: KnowledgeItemView; superseded_by_chain: KnowledgeItemView[] }> {
    return this.get(`/kr/${runId}/items/${kid}`);
  }

  // 409 is an expected outcome (someone answered first), not an error.
  async answer(qid: string, text: string, label?: string): Promise<AnswerResult> {
    const response = await fetch(`${this.config.baseUrl}/queries/${qid}/answer`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(label ? { text, label } : { text }),
    });
    if (response.ok) return { ok: true };
    const detail = await response.text();
    return { ok: false, conflict: response.status === 409, detail };
  }
}
