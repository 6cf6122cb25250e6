// Browser wiring: polling inbox, answer forms, knowledge browser, budget gauge.
// Configuration comes from the query string (?service=...&run=...&token=...&labels=a,b)
// and is remembered in localStorage.

import { ServiceClient } from "./api.js";
import { composeAnswerText, validateAnswer, type AnswerForm, type ClarificationChoice, type QueryCard } from "./model.js";
import { InboxPoller, type InboxUpdate } from "./poller.js";
import {
  renderBudgetGauge,
  renderConnectionBanner,
  renderInbox,
  renderKrItems,
  renderLineage,
  renderSubmitNotice,
} from "./views.js";

interface ConsoleConfig {
  baseUrl: string;
  runId: string;
  token?: string;
  labels: string[];
  pollMs: number;
}

function readConfig(): ConsoleConfig {
  const params = new URLSearchParams(window.location.search);
  const stored = JSON.parse(localStorage.getItem("expertloop-console") ?? "{}");
  const config: ConsoleConfig = {
    baseUrl: params.get("service") ?? stored.baseUrl ?? "http://127.0.0.1:8765",
    runId: params.get("run") ?? stored.runId ?? "run-0001",
    token: params.get("token") ?? stored.token ?? undefined,
    labels: (params.get("labels") ?? stored.labels ?? "Match,Non-Match").split(","),
    pollMs: Number(params.get("poll") ?? stored.pollMs ?? 2000),
  };
  localStorage.setItem(
    "expertloop-console",
    JSON.stringify({ ...config, labels: config.labels.join(",") }),
  );
  return config;
}

function nowS(): number {
  return Math.floor(Date.now() / 1000);
}

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function main(): void {
  const config = readConfig();
  const client = new ServiceClient({ baseUrl: config.baseUrl, token: config.token });
  let latestCards: QueryCard[] = [];

  const onUpdate = (update: InboxUpdate): void => {
    el("connection").innerHTML = renderConnectionBanner(update.connected);
    el("budget-slot").innerHTML = renderBudgetGauge(update.budget);
    latestCards = update.cards;
    el("inbox").innerHTML = renderInbox(update.cards, config.labels, nowS());
  };

  const poller = new InboxPoller(client, config.runId, onUpdate, config.pollMs);
  poller.start();

  // Answer submission (delegated; cards re-render every poll).
  el("inbox").addEventListener("submit", (event) => {
    const form = event.target as HTMLFormElement;
    if (!form.classList.contains("answer")) return;
    event.preventDefault();
    const qid = form.dataset.qid ?? "";
    const card = latestCards.find((c) => c.qid === qid);
    if (!card) return;
    const data = new FormData(form);
    const answer: AnswerForm = {
      text: String(data.get("text") ?? ""),
      label: (data.get(`label-${qid}`) as string) ?? undefined,
      resolution: (data.get(`resolution-${qid}`) as ClarificationChoice) ?? undefined,
    };
    const errors = validateAnswer(card.kind, answer);
    const errorsNode = form.querySelector(".errors") as HTMLElement;
    if (errors.length > 0) {
      errorsNode.textContent = errors.join(" ");
      return;
    }
    errorsNode.textContent = "";
    void client
      .answer(qid, composeAnswerText(card.kind, answer), answer.label)
      .then((result) => {
        const state = result.ok
          ? ({ qid, outcome: "answered", detail: "" } as const)
          : ({ qid, outcome: result.conflict ? "conflict" : "failed", detail: result.detail } as const);
        el("notices").innerHTML = renderSubmitNotice(state);
        void poller.tick();
      });
  });

  // Knowledge browser.
  const refreshKr = (): void => {
    const status = (el("kr-status") as HTMLSelectElement).value;
    const q = (el("kr-text") as HTMLInputElement).value;
    void client
      .krItems(config.runId, status || undefined, q || undefined)
      .then((items) => {
        el("kr-list").innerHTML = renderKrItems(items, nowS());
      })
      .catch(() => {
        el("kr-list").innerHTML = renderConnectionBanner(false);
      });
  };
  el("kr-refresh").addEventListener("click", refreshKr);
  el("kr-list").addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (!target.classList.contains("lineage")) return;
    event.preventDefault();
    const kid = target.dataset.kid ?? "";
    void client.krItem(config.runId, kid).then(({ superseded_by_chain }) => {
      el("kr-lineage").innerHTML = renderLineage(superseded_by_chain);
    });
  });

  // Tabs.
  const tabs = { inbox: el("tab-inbox"), kr: el("tab-kr") };
  const panes = { inbox: el("pane-inbox"), kr: el("pane-kr") };
  const activate = (which: "inbox" | "kr"): void => {
    for (const key of ["inbox", "kr"] as const) {
      tabs[key].classList.toggle("active", key === which);
      panes[key].style.display = key === which ? "block" : "none";
    }
    if (which === "kr") refreshKr();
  };
  tabs.inbox.addEventListener("click", () => activate("inbox"));
  tabs.kr.addEventListener("click", () => activate("kr"));
  activate("inbox");

  el("run-label").textContent = `${config.runId} @ ${config.baseUrl}`;
}

main();
