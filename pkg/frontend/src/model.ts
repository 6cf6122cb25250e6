// View models and form rules for the expert console. Everything here is a
// pure function so the whole console logic is testable without a DOM.

import type { BudgetView, PendingQuery } from "./api.js";

export interface QueryCard {
  qid: string;
  kind: PendingQuery["query"]["kind"];
  cost: number;
  instanceFields: [string, string][];
  preliminary: string;
  dialogue: string; // shown verbatim, never summarized
  conflict: PendingQuery["query"]["payload"]["conflict"];
  question: string;
  enqueuedAt: number;
  budgetRemaining: number;
}

export function buildQueryCards(pending: PendingQuery[], budget: BudgetView): QueryCard[] {
  const cards = pending.map((entry) => {
    const fields = Object.entries(entry.instance_snapshot.fields ?? {}) as [string, string][];
    return {
      qid: entry.query.qid,
      kind: entry.query.kind,
      cost: entry.query.cost,
      instanceFields: fields,
      preliminary: entry.query.payload.preliminary,
      dialogue: entry.dialogue_snapshot || entry.query.payload.dialogue_rendered,
      conflict: entry.query.payload.conflict,
      question: entry.query.payload.question,
      enqueuedAt: entry.enqueued_at,
      budgetRemaining: budget.remaining,
    };
  });
  // newest last: experts work the queue top-down in arrival order
  cards.sort((a, b) => a.enqueuedAt - b.enqueuedAt);
  return cards;
}

export type ClarificationChoice = "supersede_general" | "conditional_only" | "keep_old";

export interface AnswerForm {
  text: string;
  label?: string;
  resolution?: ClarificationChoice;
}

export function validateAnswer(kind: QueryCard["kind"], form: AnswerForm): string[] {
  const errors: string[] = [];
  if (kind === "AskLabel" && !form.label) {
    errors.push("Pick a label: label requests need an explicit decision.");
  }
  if (kind === "AskClarification" && !form.resolution) {
    errors.push("Pick a resolution: does the new rule replace the old one, qualify it, or not hold?");
  }
  if (kind !== "AskLabel" && !form.text.trim() && kind !== "AskClarification") {
    errors.push("Write the guidance text; it becomes knowledge the agent keeps.");
  }
  return errors;
}

// Phrasings the runtime's clarification resolver recognizes; the free text
// rides along after the verdict sentence.
const RESOLUTION_PHRASES: Record<ClarificationChoice, string> = {
  supersede_general:
    "The new rule replaces the old one generally; the old rule is outdated in all cases.",
  conditional_only:
    "The new rule applies only under its specific conditions; outside them the old rule still applies.",
  keep_old: "Keep old rule: it still holds; the new statement does not change it.",
};

export function composeAnswerText(kind: QueryCard["kind"], form: AnswerForm): string {
  if (kind === "AskClarification" && form.resolution) {
    const verdict = RESOLUTION_PHRASES[form.resolution];
    return form.text.trim() ? `${verdict} ${form.text.trim()}` : verdict;
  }
  if (kind === "AskLabel" && !form.text.trim() && form.label) {
    return `True label: ${form.label}.`;
  }
  return form.text.trim();
}

export interface SubmitState {
  qid: string;
  outcome: "answered" | "conflict" | "failed";
  detail: string;
}

export function describeOutcome(state: SubmitState): string {
  switch (state.outcome) {
    case "answered":
      return `Answer for ${state.qid} recorded.`;
    case "conflict":
      return `Query ${state.qid} was already answered by someone else; nothing was changed.`;
    default:
      return `Submitting ${state.qid} failed: ${state.detail}`;
  }
}

export function formatAge(nowS: number, thenS: number): string {
  const delta = Math.max(0, nowS - thenS);
  if (delta < 120) return `${delta}s`;
  if (delta < 7200) return `${Math.floor(delta / 60)}m`;
  return `${Math.floor(delta / 3600)}h`;
}
