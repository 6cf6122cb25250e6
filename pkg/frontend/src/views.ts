// HTML renderers. Pure string builders so they can be asserted in tests;
// app.ts attaches them to the DOM.

import type { BudgetView, KnowledgeItemView } from "./api.js";
import type { QueryCard, SubmitState } from "./model.js";
import { describeOutcome, formatAge } from "./model.js";

export function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const KIND_TITLES: Record<QueryCard["kind"], string> = {
  AskLabel: "Label request",
  AskExplanation: "Explanation request",
  AskRules: "Rule request",
  AskClarification: "Conflict clarification",
};

export function renderBudgetGauge(budget: BudgetView | null): string {
  if (!budget) return `<div class="budget" id="budget">budget unavailable</div>`;
  const pct = budget.total > 0 ? Math.round((budget.spent / budget.total) * 100) : 0;
  return `<div class="budget" id="budget">
    <span class="budget-num">${budget.remaining}</span> of ${budget.total} left
    <div class="budget-bar"><div class="budget-fill" style="width:${pct}%"></div></div>
  </div>`;
}

export function renderConnectionBanner(connected: boolean): string {
  return connected
    ? ""
    : `<div class="banner error">Service unreachable; retrying&hellip;</div>`;
}

function labelButtons(card: QueryCard, labels: string[]): string {
  const options = labels
    .map(
      (label) =>
        `<label class="pick"><input type="radio" name="label-${card.qid}" value="${esc(label)}"> ${esc(label)}</label>`,
    )
    .join("\n");
  return `<fieldset class="labels"><legend>True label</legend>${options}</fieldset>`;
}

function clarificationChoices(card: QueryCard): string {
  return `<fieldset class="resolution"><legend>Resolution</legend>
    <label class="pick"><input type="radio" name="resolution-${card.qid}" value="supersede_general"> New rule supersedes the old one generally</label>
    <label class="pick"><input type="radio" name="resolution-${card.qid}" value="conditional_only"> New rule applies only under its conditions</label>
    <label class="pick"><input type="radio" name="resolution-${card.qid}" value="keep_old"> Keep the old rule; it still holds</label>
  </fieldset>`;
}

export function renderQueryCard(card: QueryCard, labels: string[], nowS: number): string {
  const fields = card.instanceFields
    .map(([key, value]) => `<tr><th>${esc(key)}</th><td>${esc(value)}</td></tr>`)
    .join("\n");
  const conflict = card.conflict
    ? `<div class="conflict">
         <h4>Conflicting knowledge</h4>
         <p class="old"><b>${esc(card.conflict.old_ref)}</b>: ${esc(card.conflict.old_text)}</p>
         <p class="new"><b>${esc(card.conflict.new_ref)}</b>: ${esc(card.conflict.new_text)}</p>
         <p class="question">${esc(card.question)}</p>
       </div>`
    : "";
  const controls =
    card.kind === "AskLabel"
      ? labelButtons(card, labels)
      : card.kind === "AskClarification"
        ? clarificationChoices(card)
        : "";
  return `<article class="card" data-qid="${esc(card.qid)}">
    <header>
      <span class="kind kind-${card.kind}">${KIND_TITLES[card.kind]}</span>
      <span class="cost">cost ${card.cost}</span>
      <span class="age">waiting ${formatAge(nowS, card.enqueuedAt)}</span>
      <code class="qid">${esc(card.qid)}</code>
    </header>
    <table class="fields">${fields}</table>
    <p class="preliminary">Agent's preliminary answer: <b>${esc(card.preliminary)}</b></p>
    <details open class="dialogue">
      <summary>Agent self-review (verbatim)</summary>
      <pre>${esc(card.dialogue)}</pre>
    </details>
    ${conflict}
    <form class="answer" data-qid="${esc(card.qid)}">
      ${controls}
      <textarea name="text" rows="3" placeholder="Guidance for the agent (becomes knowledge)"></textarea>
      <div class="errors" aria-live="polite"></div>
      <button type="submit">Send answer</button>
    </form>
  </article>`;
}

export function renderInbox(cards: QueryCard[], labels: string[], nowS: number): string {
  if (cards.length === 0) {
    return `<div class="empty">No queries waiting. The agent is working on its own.</div>`;
  }
  return cards.map((card) => renderQueryCard(card, labels, nowS)).join("\n");
}

export function renderSubmitNotice(state: SubmitState): string {
  const cls = state.outcome === "answered" ? "ok" : state.outcome === "conflict" ? "warn" : "error";
  return `<div class="banner ${cls}">${esc(describeOutcome(state))}</div>`;
}

export function renderKrItems(items: KnowledgeItemView[], nowS: number): string {
  if (items.length === 0) return `<div class="empty">No knowledge items match.</div>`;
  const rows = items
    .map((item) => {
      const supersededBy = item.meta.superseded_by
        ? `<a href="#" class="lineage" data-kid="${esc(item.meta.superseded_by)}">superseded by ${esc(item.meta.superseded_by)}</a>`
        : "";
      return `<article class="kr-item status-${item.status}">
        <header>
          <code>${esc(item.kid)}</code>
          <span class="badge badge-${item.status}">${item.status}</span>
          <span class="ts">validated ${formatAge(nowS, item.ts_validated)} ago</span>
          <span class="uses">${item.meta.usage_count} uses</span>
          ${supersededBy}
        </header>
        <p>${esc(item.content.text)}</p>
      </article>`;
    })
    .join("\n");
  return rows;
}

export function renderLineage(chain: KnowledgeItemView[]): string {
  if (chain.length === 0) return "";
  const hops = chain.map((item) => `<li><code>${esc(item.kid)}</code> ${esc(item.content.text)}</li>`);
  return `<ol class="lineage-chain">${hops.join("\n")}</ol>`;
}

export function pageShell(body: string): string {
  return `<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="UTF-8">
<meta name="viewport" content="width=device-width, initial-scale=1.0">
<title>Expert console</title>
<style>
  * { box-sizing: border-box; }
  body { font-family: -apple-system, 'Segoe UI', Roboto, sans-serif; margin: 0; background: #f5f6f8; color: #1f2430; }
  header.top { background: #1f2430; color: #fff; padding: 12px 24px; display: flex; gap: 24px; align-items: center; position: sticky; top: 0; }
  header.top h1 { font-size: 18px; margin: 0; }
  .budget { margin-left: auto; font-size: 13px; }
  .budget-num { font-size: 18px; font-weight: 700; }
  .budget-bar { width: 160px; height: 6px; background: #3a4255; border-radius: 3px; margin-top: 4px; }
  .budget-fill { height: 6px; background: #f59e0b; border-radius: 3px; }
  main { max-width: 960px; margin: 0 auto; padding: 24px; }
  .banner { padding: 10px 14px; border-radius: 6px; margin: 12px 0; }
  .banner.error { background: #fde8e8; color: #9b1c1c; }
  .banner.warn { background: #fef3c7; color: #92400e; }
  .banner.ok { background: #def7ec; color: #046c4e; }
  .card, .kr-item { background: #fff; border: 1px solid #e2e6ee; border-radius: 8px; padding: 16px; margin-bottom: 16px; }
  .card header, .kr-item header { display: flex; gap: 12px; align-items: baseline; margin-bottom: 8px; }
  .kind { font-weight: 700; }
  .fields th { text-align: left; padding-right: 12px; color: #5b6472; font-weight: 500; }
  .dialogue pre { background: #f8f9fb; padding: 10px; border-radius: 6px; white-space: pre-wrap; }
  .conflict { border-left: 4px solid #f59e0b; padding-left: 12px; margin: 10px 0; }
  .badge { padding: 2px 8px; border-radius: 999px; font-size: 11px; font-weight: 600; }
  .badge-Valid { background: #def7ec; color: #046c4e; }
  .badge-PotentiallyOutdated { background: #fef3c7; color: #92400e; }
  .badge-Superseded { background: #e5e7eb; color: #4b5563; }
  textarea { width: 100%; margin-top: 8px; }
  .pick { display: block; margin: 2px 0; }
  .errors { color: #9b1c1c; font-size: 13px; }
  nav.tabs { display: flex; gap: 8px; margin-bottom: 16px; }
  nav.tabs button { padding: 6px 14px; border: 1px solid #cbd2dd; background: #fff; border-radius: 6px; cursor: pointer; }
  nav.tabs button.active { background: #1f2430; color: #fff; }
</style>
</head>
<body>
${body}
<script type="module" src="./app.js"></script>
</body>
</html>`;
}
