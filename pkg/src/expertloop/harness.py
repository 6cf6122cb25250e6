"""Streaming evaluation loop: predict, solicit, integrate, measure.

One run folds ``step`` over a stream. Each step predicts from the current
knowledge subset, lets the query policy decide whether to spend budget on
the expert, integrates any feedback, and records the outcome. Every state
change is written to the run's append-only event log before it is applied,
so a finished (or interrupted) run can be rebuilt from the log alone.
"""

from __future__ import annotations

import dataclasses
import logging
import random
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import OracleTimeout, ProviderError, Unparseable
from .events import EventLog, EventRecord
from .guidance import (
    BudgetLedger,
    ConfidenceLevel,
    Decision,
    Query,
    QueryKind,
    SelfDialogue,
    assess_confidence,
    decide_intervention,
    formulate_query,
    run_self_dialogue,
)
from .integrate import (
    IntegrationParams,
    apply_clarification_resolution,
    extract_assertions,
    integrate_feedback,
    resolve_clarification,
)
from .kr import KnowledgeRepository, ScoredItem, ScoringParams, Source
from .llm import ChatRequest, CompletionProvider, parse_choice
from .metrics import Confusion, MetricsResult, RunMetrics, compute_metrics
from .oracle import Oracle, OracleFeedback
from .prompts import TemplateSet, render
from .similarity import EmbeddingCache, cosine
from .stream import Instance, LabelSpace, PhaseSpec, instance_text

logger = logging.getLogger(__name__)

# Simulated handling cost per call when the run is fully scripted; live runs
# measure wall clock instead.
SIM_COST_LLM_CALL_S = 1.0
SIM_COST_ORACLE_ANSWER_S = 30.0


class CountingProvider:
    """Wraps a provider to count completions (handling-time accounting)."""

    def __init__(self, inner: CompletionProvider):
        self.inner = inner
        self.calls = 0

    def complete(self, request: ChatRequest):
        self.calls += 1
        return self.inner.complete(request)


def render_knowledge(scored: Sequence[ScoredItem], now: int) -> str:
    if not scored:
        return "(none)"
    lines = []
    for s in scored:
        age = now - s.item.ts_validated
        lines.append(
            f"- [{s.item.kid}] (status={s.item.status.value}, age_s={age}, score={s.composite:.4f}) "
            f"{s.item.content.text}"
        )
    return "\n".join(lines)


@dataclass
class RunState:
    """Everything a run owns: repository, ledger, log, counters, config bits."""

    run_id: str
    label_space: LabelSpace
    scoring: ScoringParams
    integration: IntegrationParams
    templates: TemplateSet
    questions: list[str]
    cost_table: dict[QueryKind, int]
    ledger: BudgetLedger
    log: EventLog
    kr: KnowledgeRepository
    embed: EmbeddingCache
    phases: list[PhaseSpec] = field(default_factory=list)
    allowed_kinds: Optional[tuple[QueryKind, ...]] = None
    checkpoint_every: int = 50
    aht_mode: str = "simulated"  # simulated | wall
    metrics_mode: str = "binary"
    seed: int = 0
    now: int = 0
    confusion: Confusion = field(default_factory=Confusion)
    segment_confusions: dict[int, Confusion] = field(default_factory=dict)
    processed: int = 0
    handling_cost_s: float = 0.0
    _qid_counter: int = 0
    waiting_query: Optional[str] = None

    @staticmethod
    def create(
        run_id: str,
        label_space: LabelSpace,
        budget: int,
        cost_table: dict[QueryKind, int],
        scoring: ScoringParams,
        integration: IntegrationParams,
        templates: TemplateSet,
        questions: list[str],
        log_path: Optional[str] = None,
        phases: Optional[list[PhaseSpec]] = None,
        allowed_kinds: Optional[Sequence[QueryKind]] = None,
        checkpoint_every: int = 50,
        metrics_mode: str = "binary",
        seed: int = 0,
        embed: Optional[EmbeddingCache] = None,
        aht_mode: str = "simulated",
    ) -> "RunState":
        log = EventLog(path=log_path)
        state = RunState(
            run_id=run_id,
            label_space=label_space,
            scoring=scoring,
            integration=integration,
            templates=templates,
            questions=questions,
            cost_table=cost_table,
            ledger=BudgetLedger(total=budget),
            log=log,
            kr=KnowledgeRepository(run_id=run_id),
            embed=embed if embed is not None else EmbeddingCache(),
            phases=list(phases or []),
            allowed_kinds=tuple(allowed_kinds) if allowed_kinds else None,
            checkpoint_every=checkpoint_every,
            metrics_mode=metrics_mode,
            seed=seed,
            aht_mode=aht_mode,
        )
        state.kr.set_emitter(state.emit)  # repository writes through the run log
        return state

    # -- event plumbing --

    def emit(self, kind: str, payload: dict) -> None:
        self.log.append(kind, payload, ts=self.now)

    def next_qid(self) -> str:
        self._qid_counter += 1
        return f"q-{self.run_id}-{self._qid_counter:04d}"

    # -- accounting --

    def segment_for(self, ordinal: int) -> Confusion:
        start = 1
        for phase in self.phases:
            if phase.start_ordinal <= ordinal:
                start = phase.start_ordinal
        return self.segment_confusions.setdefault(start, Confusion())

    def record_outcome(self, x: Instance, label: str) -> None:
        self.confusion.record(x.truth, label)
        self.segment_for(x.ordinal).record(x.truth, label)
        self.processed += 1

    def build_metrics(self) -> RunMetrics:
        positive = self.label_space.positive_label()
        overall = compute_metrics(self.confusion, self.metrics_mode, positive)
        per_phase = [
            (start, compute_metrics(conf, self.metrics_mode, positive))
            for start, conf in sorted(self.segment_confusions.items())
        ]
        return RunMetrics(
            overall=overall,
            per_phase=per_phase,
            queries_by_kind=self.ledger.counts_by_kind(),
            budget_spent=self.ledger.spent,
            budget_total=self.ledger.total,
            aht_proxy_s=(self.handling_cost_s / self.processed) if self.processed else None,
            confusion=self.confusion,
        )


# -- prediction -----------------------------------------------------------------

def predict(
    x: Instance, state: RunState, llm: CompletionProvider
) -> tuple[str, str, list[ScoredItem]]:
    """Retrieve the knowledge subset, prompt the model, parse the label.

    Zero-composite items (superseded, or irrelevant under threshold scoring)
    never reach the prompt. An unparseable reply falls back to the label
    space's configured default, with a warning.
    """
    text = instance_text(x)
    query_vec = state.embed(text)
    items = {item.kid: item for item in state.kr.items()}
    relevance = {kid: cosine(state.embed(item.content.text), query_vec) for kid, item in items.items()}
    scored = state.kr.retrieve_subset(lambda kid: relevance[kid], state.now, state.scoring)
    visible = [s for s in scored if s.composite > 0.0]
    system, user_template = state.templates.pair("predict")
    user = render(
        user_template,
        fields=text,
        knowledge=render_knowledge(visible, state.now),
        labels="\n".join(state.label_space.labels),
    )
    response = llm.complete(ChatRequest.single(system, user))
    try:
        label = parse_choice(response.text, state.label_space.labels)
    except Unparseable:
        label = state.label_space.fallback
        logger.warning("unparseable prediction for %s; recording default %r", x.id, label)
    return label, response.text, visible


# -- query policies ---------------------------------------------------------------

@dataclass
class PolicyDecision:
    query: Optional[Query] = None
    dialogue: Optional[SelfDialogue] = None
    confidence: Optional[str] = None
    probe: Optional[float] = None


class GuidedPolicy:
    """Full solicitation loop: self-dialogue, confidence, trigger, formulate."""

    name = "guided"

    def __init__(self, llm: CompletionProvider):
        self.llm = llm

    def decide(
        self, state: RunState, x: Instance, y_hat: str, reasoning: str, visible: list[ScoredItem]
    ) -> PolicyDecision:
        dialogue = run_self_dialogue(
            instance_text(x),
            y_hat,
            reasoning,
            render_knowledge(visible, state.now),
            self.llm,
            state.questions,
            state.templates,
        )
        conf = assess_confidence(dialogue, self.llm, state.templates)
        draft = formulate_query(
            dialogue,
            x.id,
            y_hat,
            state.cost_table,
            qid="q-draft",
            now=state.now,
            allowed_kinds=state.allowed_kinds,
        )
        decision = decide_intervention(conf, state.ledger, draft.cost)
        query = None
        if decision == Decision.QUERY_EXPERT:
            query = dataclasses.replace(draft, qid=state.next_qid())
        return PolicyDecision(query=query, dialogue=dialogue, confidence=conf.value)


class RandomPolicy:
    """Budget-limited random label querying (no reflection)."""

    name = "random"

    def __init__(self, rate: float, seed: int):
        if not (0.0 <= rate <= 1.0):
            raise ValueError("rate must lie in [0, 1]")
        self.rate = rate
        self.rng = random.Random(seed)

    def decide(
        self, state: RunState, x: Instance, y_hat: str, reasoning: str, visible: list[ScoredItem]
    ) -> PolicyDecision:
        draw = self.rng.random()
        cost = state.cost_table[QueryKind.ASK_LABEL]
        if draw < self.rate and state.ledger.can_afford(cost):
            from .guidance import QueryPayload

            query = Query(
                qid=state.next_qid(),
                kind=QueryKind.ASK_LABEL,
                cost=cost,
                payload=QueryPayload(instance_id=x.id, preliminary=y_hat),
                issued_at=state.now,
            )
            return PolicyDecision(query=query)
        return PolicyDecision()


_NUMBER = re.compile(r"\d*\.?\d+")


class UncertaintyPolicy:
    """Single-probe uncertainty sampling: ask for a label when the model's
    self-reported correctness probability falls below theta."""

    name = "uncertainty"

    def __init__(self, llm: CompletionProvider, theta: float):
        if not (0.0 <= theta <= 1.0):
            raise ValueError("theta must lie in [0, 1]")
        self.llm = llm
        self.theta = theta

    def probe(self, state: RunState, x: Instance, y_hat: str, reasoning: str) -> tuple[float, str]:
        system, user_template = state.templates.pair("probe")
        user = render(user_template, fields=instance_text(x), prediction=y_hat, reasoning=reasoning)
        response = self.llm.complete(ChatRequest.single(system, user))
        hit = _NUMBER.search(response.text)
        if hit is None:
            return 0.5, response.text
        return min(1.0, max(0.0, float(hit.group(0)))), response.text

    def decide(
        self, state: RunState, x: Instance, y_hat: str, reasoning: str, visible: list[ScoredItem]
    ) -> PolicyDecision:
        score, probe_text = self.probe(state, x, y_hat, reasoning)
        cost = state.cost_table[QueryKind.ASK_LABEL]
        dialogue = SelfDialogue(
            pairs=[("confidence probe", probe_text)], gaps=[], rendered=f"Q: confidence probe\nA: {probe_text}"
        )
        if score < self.theta and state.ledger.can_afford(cost):
            from .guidance import QueryPayload

            query = Query(
                qid=state.next_qid(),
                kind=QueryKind.ASK_LABEL,
                cost=cost,
                payload=QueryPayload(
                    instance_id=x.id, preliminary=y_hat, dialogue_rendered=dialogue.rendered
                ),
                issued_at=state.now,
            )
            return PolicyDecision(query=query, dialogue=dialogue, probe=score)
        return PolicyDecision(probe=score)


# -- the step ---------------------------------------------------------------------

@dataclass
class StepOutcome:
    instance_id: str
    preliminary: str
    final: str
    queried: Optional[Query] = None
    feedback: Optional[OracleFeedback] = None
    expired: bool = False


def _source_for(feedback: OracleFeedback) -> Source:
    return Source.HUMAN if feedback.source == "human" else Source.LLM_ORACLE


def _handle_feedback(
    state: RunState, x: Instance, query: Query, feedback: OracleFeedback, llm: CompletionProvider, oracle: Oracle
) -> None:
    """Integrate answered feedback; runs the clarification follow-ups too."""
    snapshot = instance_text(x)
    assertions = extract_assertions(
        feedback, snapshot, query.payload.preliminary, llm, state.templates, query.kind.value
    )
    report = integrate_feedback(
        assertions,
        state.kr,
        state.now,
        llm,
        lambda a, b: cosine(state.embed(a), state.embed(b)),
        state.integration,
        state.templates,
        _source_for(feedback),
        instance_snapshot=snapshot,
        instance_id=x.id,
        preliminary=query.payload.preliminary,
        cost_table=state.cost_table,
        ledger=state.ledger,
        qid_gen=state.next_qid,
    )
    state.emit(
        "kr_mutation",
        {"op": "integration_report", "qid": query.qid, "report": report.to_dict()},
    )
    for clar in report.clarifications:
        conflict = clar.payload.conflict
        # Affordability can have changed since the report was built (earlier
        # clarifications in this very loop spend from the same ledger).
        issued = state.ledger.can_afford(clar.cost)
        state.emit(
            "clarification",
            {
                "qid": clar.qid,
                "old_kid": conflict.old_ref if conflict else None,
                "new_kid": conflict.new_ref if conflict else None,
                "question": clar.payload.question,
                "issued": issued,
            },
        )
        if not issued:
            continue
        state.emit("query_issued", clar.to_dict())
        try:
            clar_feedback = oracle.answer(x, clar, state.now)
        except OracleTimeout:
            state.emit("feedback_received", {"qid": clar.qid, "status": "expired"})
            continue
        state.ledger.charge(clar, state.now)
        state.handling_cost_s += SIM_COST_ORACLE_ANSWER_S if state.aht_mode == "simulated" else 0.0
        resolution = resolve_clarification(clar_feedback.text)
        state.emit(
            "feedback_received",
            {
                "qid": clar.qid,
                "status": "answered",
                "feedback": clar_feedback.to_dict(),
                "cost": clar.cost,
                "spent": state.ledger.spent,
                "resolution": resolution.value,
            },
        )
        if conflict:
            apply_clarification_resolution(
                resolution, conflict.old_ref, conflict.new_ref, state.kr, state.now,
                note=clar_feedback.text[:160],
            )
        # Depth-1 re-entry: the answer is feedback too, but its own ambiguous
        # comparisons may not spawn further clarifications.
        followup = extract_assertions(
            clar_feedback, snapshot, query.payload.preliminary, llm, state.templates, clar.kind.value
        )
        if followup:
            sub_report = integrate_feedback(
                followup,
                state.kr,
                state.now,
                llm,
                lambda a, b: cosine(state.embed(a), state.embed(b)),
                state.integration,
                state.templates,
                _source_for(clar_feedback),
                instance_snapshot=snapshot,
                instance_id=x.id,
                preliminary=query.payload.preliminary,
                cost_table=None,
                ledger=state.ledger,
                qid_gen=None,
            )
            state.emit(
                "kr_mutation",
                {"op": "integration_report", "qid": clar.qid, "report": sub_report.to_dict()},
            )


def step(
    state: RunState, x: Instance, oracle: Oracle, policy, llm: CompletionProvider
) -> StepOutcome:
    state.now = x.ts
    started = time.perf_counter()
    llm_counter = llm.calls if isinstance(llm, CountingProvider) else None
    state.emit(
        "instance_seen",
        {"id": x.id, "ordinal": x.ordinal, "ts": x.ts, "fields": dict(x.fields), "truth": x.truth},
    )
    y_hat, reasoning, visible = predict(x, state, llm)
    decision = policy.decide(state, x, y_hat, reasoning, visible)
    outcome = StepOutcome(instance_id=x.id, preliminary=y_hat, final=y_hat)

    if decision.query is not None:
        query = decision.query
        outcome.queried = query
        if decision.dialogue is not None:
            state.emit(
                "dialogue",
                {
                    "instance_id": x.id,
                    "dialogue": decision.dialogue.to_dict(),
                    "confidence": decision.confidence,
                    "probe": decision.probe,
                },
            )
        state.waiting_query = query.qid
        state.emit("query_issued", query.to_dict())
        try:
            feedback = oracle.answer(x, query, state.now)
        except OracleTimeout:
            state.emit("feedback_received", {"qid": query.qid, "status": "expired"})
            outcome.expired = True
            feedback = None
        finally:
            state.waiting_query = None
        if feedback is not None:
            # Budget is committed only once an answer actually arrived.
            state.ledger.charge(query, state.now)
            state.handling_cost_s += SIM_COST_ORACLE_ANSWER_S if state.aht_mode == "simulated" else 0.0
            state.emit(
                "feedback_received",
                {
                    "qid": query.qid,
                    "status": "answered",
                    "feedback": feedback.to_dict(),
                    "cost": query.cost,
                    "spent": state.ledger.spent,
                },
            )
            outcome.feedback = feedback
            if query.kind == QueryKind.ASK_LABEL and feedback.label:
                outcome.final = feedback.label
            _handle_feedback(state, x, query, feedback, llm, oracle)

    if state.aht_mode == "simulated" and llm_counter is not None:
        state.handling_cost_s += (llm.calls - llm_counter) * SIM_COST_LLM_CALL_S
    elif state.aht_mode == "wall":
        state.handling_cost_s += time.perf_counter() - started

    state.emit(
        "prediction",
        {
            "instance_id": x.id,
            "label": outcome.final,
            "preliminary": y_hat,
            "reasoning": reasoning,
            "context_kids": [s.item.kid for s in visible],
            "overridden_by": outcome.queried.qid
            if outcome.final != y_hat and outcome.queried
            else None,
        },
    )
    state.record_outcome(x, outcome.final)
    if state.checkpoint_every and state.processed % state.checkpoint_every == 0:
        state.emit(
            "metrics_snapshot",
            {"ordinal": x.ordinal, "metrics": state.build_metrics().to_dict()},
        )
    return outcome


def run_stream(
    stream: Sequence[Instance],
    state: RunState,
    oracle: Oracle,
    policy,
    llm: CompletionProvider,
) -> RunMetrics:
    """Sequential fold of ``step`` over the stream; errors abort but stay logged."""
    if stream:
        state.now = stream[0].ts
    state.emit(
        "run_control",
        {
            "action": "start",
            "run_id": state.run_id,
            "budget": state.ledger.total,
            "seed": state.seed,
            "policy": getattr(policy, "name", type(policy).__name__),
            "phases": [p.to_dict() for p in state.phases],
            "labels": list(state.label_space.labels),
            "metrics_mode": state.metrics_mode,
        },
    )
    try:
        for x in stream:
            step(state, x, oracle, policy, llm)
    except ProviderError as exc:
        state.emit(
            "run_control",
            {"action": "error", "detail": str(exc), "fingerprint": exc.fingerprint},
        )
        raise
    metrics = state.build_metrics()
    state.emit(
        "run_control",
        {"action": "finish", "metrics": metrics.to_dict(), "handling_cost_s": state.handling_cost_s},
    )
    return metrics


# -- replay -----------------------------------------------------------------------

@dataclass
class ReplayResult:
    run_id: str
    kr: KnowledgeRepository
    metrics: RunMetrics
    spent: int
    budget: int
    processed: int


def replay_run(records: Sequence[EventRecord]) -> ReplayResult:
    """Rebuild run state purely from its event log.

    The repository is folded from kr_mutation events; predictions joined
    with instance truths rebuild the confusion; charged feedback rebuilds
    the ledger. The result must match the live run field for field.
    """
    run_id = "run"
    budget = 0
    phases: list[PhaseSpec] = []
    labels: tuple[str, ...] = ()
    metrics_mode = "binary"
    truths: dict[str, str] = {}
    finals: dict[str, str] = {}
    order: list[str] = []
    ordinals: dict[str, int] = {}
    spent = 0
    queries_by_kind: dict[str, int] = {}
    issued_kinds: dict[str, str] = {}
    handling_cost_s: Optional[float] = None

    for record in records:
        payload = record.payload
        if record.kind == "run_control":
            if payload.get("action") == "start":
                run_id = payload.get("run_id", run_id)
                budget = payload.get("budget", 0)
                phases = [PhaseSpec.from_dict(p) for p in payload.get("phases", [])]
                labels = tuple(payload.get("labels", ()))
                metrics_mode = payload.get("metrics_mode", "binary")
            elif payload.get("action") == "finish":
                handling_cost_s = payload.get("handling_cost_s")
        elif record.kind == "instance_seen":
            truths[payload["id"]] = payload["truth"]
            ordinals[payload["id"]] = payload["ordinal"]
            order.append(payload["id"])
        elif record.kind == "prediction":
            finals[payload["instance_id"]] = payload["label"]
        elif record.kind == "query_issued":
            issued_kinds[payload["qid"]] = payload["kind"]
        elif record.kind == "feedback_received":
            if payload.get("status") == "answered":
                spent += payload.get("cost", 0)
                kind = issued_kinds.get(payload["qid"], "unknown")
                queries_by_kind[kind] = queries_by_kind.get(kind, 0) + 1

    kr = KnowledgeRepository.replay_from_log(records, run_id=run_id)
    label_space = LabelSpace(labels=labels) if len(labels) >= 2 else LabelSpace(labels=("Match", "Non-Match"))
    positive = label_space.positive_label()
    confusion = Confusion()
    segments: dict[int, Confusion] = {}

    def segment_start(ordinal: int) -> int:
        start = 1
        for phase in phases:
            if phase.start_ordinal <= ordinal:
                start = phase.start_ordinal
        return start

    processed = 0
    for iid in order:
        if iid in finals:
            confusion.record(truths[iid], finals[iid])
            segments.setdefault(segment_start(ordinals[iid]), Confusion()).record(truths[iid], finals[iid])
            processed += 1

    overall = compute_metrics(confusion, metrics_mode, positive)
    per_phase = [
        (start, compute_metrics(conf, metrics_mode, positive)) for start, conf in sorted(segments.items())
    ]
    metrics = RunMetrics(
        overall=overall,
        per_phase=per_phase,
        queries_by_kind=queries_by_kind,
        budget_spent=spent,
        budget_total=budget,
        aht_proxy_s=(handling_cost_s / processed) if handling_cost_s is not None and processed else None,
        confusion=confusion,
    )
    return ReplayResult(
        run_id=run_id, kr=kr, metrics=metrics, spent=spent, budget=budget, processed=processed
    )
