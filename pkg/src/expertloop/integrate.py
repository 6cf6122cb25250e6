"""Feedback integration: parse expert guidance and fold it into the repository.

Each piece of feedback becomes one or more typed assertions. New assertions
enter the repository as fresh Valid items; existing items similar enough to
an assertion are compared by the model and transitioned (superseded,
flagged outdated, linked) according to the judged relation. Ambiguous
relations spawn a clarification query back to the expert, budget
permitting.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

from .errors import ExpertLoopError, Unparseable
from .guidance import (
    BudgetLedger,
    ConflictRef,
    Query,
    QueryKind,
    QueryPayload,
)
from .kr import (
    ContentKind,
    ExemplarPayload,
    ItemStatus,
    KnowledgeContent,
    KnowledgeItem,
    KnowledgeRepository,
    Source,
    TransitionCause,
)
from .llm import ChatRequest, CompletionProvider, parse_choice
from .oracle import OracleFeedback
from .prompts import TemplateSet, render

logger = logging.getLogger(__name__)

RELATION_OPTIONS = ("contradicts", "supersedes", "updates", "consistent", "ambiguous")

# Max existing items compared per assertion; bounds model calls per feedback.
MAX_CANDIDATES = 10

NO_ASSERTIONS_TOKEN = "(no assertions)"

_ASSERTION_LINE = re.compile(
    r"^\s*\d+[.)]\s*\[(rule|explanation|fact|exemplar)(?:\s+label=([^\]]+))?\]\s*(\S.*?)\s*$",
    re.MULTILINE,
)


class Relation(str, Enum):
    CONTRADICTS = "contradicts"
    SUPERSEDES = "supersedes"
    UPDATES = "updates"
    CONSISTENT = "consistent"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class Assertion:
    kind: ContentKind
    text: str
    derived_from: tuple[str, str]  # (qid, feedback excerpt)
    label: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "text": self.text,
            "derived_from": list(self.derived_from),
            "label": self.label,
        }


@dataclass
class IntegrationReport:
    new_kids: list[str] = field(default_factory=list)
    superseded: list[tuple[str, str]] = field(default_factory=list)  # (old_kid, new_kid)
    flagged_outdated: list[str] = field(default_factory=list)
    clarifications: list[Query] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (reason, payload)
    linked: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "new_kids": list(self.new_kids),
            "superseded": [list(pair) for pair in self.superseded],
            "flagged_outdated": list(self.flagged_outdated),
            "clarifications": [q.to_dict() for q in self.clarifications],
            "skipped": [list(pair) for pair in self.skipped],
            "linked": [list(pair) for pair in self.linked],
        }


def extract_assertions(
    feedback: OracleFeedback,
    context_fields: str,
    preliminary: str,
    llm: CompletionProvider,
    templates: TemplateSet,
    query_kind: str = "",
) -> list[Assertion]:
    """Parse feedback into typed assertions via a strict output schema.

    The model is asked for numbered, kind-tagged lines. Anything that fails
    to parse collapses into a single explanation assertion carrying the
    feedback verbatim, so no guidance is ever dropped silently.
    """
    if not feedback.text or not feedback.text.strip():
        raise ValueError("feedback text is empty")
    system, user_template = templates.pair("extract")
    user = render(
        user_template,
        feedback=feedback.text,
        query_kind=query_kind,
        fields=context_fields,
        prediction=preliminary,
    )
    response = llm.complete(
        ChatRequest.single(system, user, schema_hint=templates.schema_hint("extract"))
    )
    excerpt = feedback.text[:80]
    if NO_ASSERTIONS_TOKEN in response.text:
        return []
    assertions = []
    for kind_raw, label, text in _ASSERTION_LINE.findall(response.text):
        assertions.append(
            Assertion(
                kind=ContentKind(kind_raw),
                text=text,
                derived_from=(feedback.qid, excerpt),
                label=label.strip() if label else None,
            )
        )
    if not assertions:
        logger.warning("assertion extraction unparseable; storing feedback verbatim")
        return [
            Assertion(
                kind=ContentKind.EXPLANATION,
                text=feedback.text,
                derived_from=(feedback.qid, excerpt),
            )
        ]
    return assertions


def classify_relation(
    new_text: str, old_text: str, llm: CompletionProvider, templates: TemplateSet
) -> Relation:
    """Judge how new knowledge relates to an existing item (ambiguous on doubt)."""
    if not new_text.strip() or not old_text.strip():
        raise ValueError("relation classification needs two non-empty texts")
    system, user_template = templates.pair("relation")
    user = render(user_template, new_text=new_text, old_text=old_text)
    response = llm.complete(ChatRequest.single(system, user))
    try:
        return Relation(parse_choice(response.text, RELATION_OPTIONS))
    except Unparseable:
        logger.warning("relation reply unparseable, treating as ambiguous: %r", response.text[:80])
        return Relation.AMBIGUOUS


def build_content(assertion: Assertion, instance_snapshot: str, fallback_label: str) -> KnowledgeContent:
    payload = None
    if assertion.kind == ContentKind.EXEMPLAR:
        payload = ExemplarPayload(
            instance_snapshot=instance_snapshot,
            label=assertion.label or fallback_label,
            reason=assertion.text,
        )
    return KnowledgeContent(kind=assertion.kind, text=assertion.text, exemplar_payload=payload)


def generate_clarification(
    old_item: KnowledgeItem,
    new_kid: str,
    new_text: str,
    instance_snapshot: str,
    instance_id: str,
    preliminary: str,
    cost_table: dict[QueryKind, int],
    qid: str,
    now: int,
    templates: TemplateSet,
) -> Query:
    """Build the follow-up question asking how broadly the new rule applies."""
    question = render(
        templates.text("clarification_question"),
        old_kid=old_item.kid,
        old_text=old_item.content.text,
        new_kid=new_kid,
        new_text=new_text,
        instance=instance_snapshot,
    )
    conflict = ConflictRef(
        old_ref=old_item.kid,
        new_ref=new_kid,
        old_text=old_item.content.text,
        new_text=new_text,
        question=question,
    )
    payload = QueryPayload(
        instance_id=instance_id,
        preliminary=preliminary,
        conflict=conflict,
        question=question,
    )
    return Query(
        qid=qid,
        kind=QueryKind.ASK_CLARIFICATION,
        cost=cost_table[QueryKind.ASK_CLARIFICATION],
        payload=payload,
        issued_at=now,
    )


@dataclass(frozen=True)
class IntegrationParams:
    tau_sim: float = 0.40
    max_candidates: int = MAX_CANDIDATES
    conflict_resolution: bool = True  # relation pass can be switched off


def integrate_feedback(
    assertions: Sequence[Assertion],
    kr: KnowledgeRepository,
    now: int,
    llm: CompletionProvider,
    sim: Callable[[str, str], float],
    params: IntegrationParams,
    templates: TemplateSet,
    source: Source,
    instance_snapshot: str = "",
    instance_id: str = "",
    preliminary: str = "",
    cost_table: Optional[dict[QueryKind, int]] = None,
    ledger: Optional[BudgetLedger] = None,
    qid_gen: Optional[Callable[[], str]] = None,
) -> IntegrationReport:
    """Fold extracted assertions into the repository.

    Per assertion: compare against every sufficiently similar pre-existing
    item in descending similarity order (capped), then add the new item and
    apply the judged transitions. Relation calls happen before any mutation
    so a provider failure skips the assertion without leaving partial state;
    assertions already integrated stand.
    """
    report = IntegrationReport()
    # Candidates are snapshotted up front: integration compares against the
    # repository as it stood when the feedback arrived. Superseded items are
    # out of reach of every lattice edge, so they are never candidates.
    candidates = [item for item in kr.items() if item.status != ItemStatus.SUPERSEDED]
    for assertion in assertions:
        try:
            content = build_content(assertion, instance_snapshot, preliminary)
            related: list[tuple[float, KnowledgeItem]] = []
            if params.conflict_resolution:
                for old in candidates:
                    score = sim(content.text, old.content.text)
                    if score > params.tau_sim:
                        related.append((score, old))
                related.sort(key=lambda pair: (-pair[0], pair[1].kid))
                related = related[: params.max_candidates]
            relations = [
                (old, classify_relation(content.text, old.content.text, llm, templates))
                for _, old in related
            ]
        except ExpertLoopError as exc:
            report.skipped.append((f"assertion_failed:{type(exc).__name__}", assertion.text[:120]))
            continue

        new_kid = kr.add_item(content, source, now)
        report.new_kids.append(new_kid)
        for old, relation in relations:
            current = kr.get(old.kid)
            if relation in (Relation.SUPERSEDES, Relation.UPDATES):
                if current.status == ItemStatus.SUPERSEDED:
                    continue
                kr.transition_status(
                    old.kid,
                    ItemStatus.SUPERSEDED,
                    now,
                    TransitionCause(relation=relation.value, other_kid=new_kid),
                )
                report.superseded.append((old.kid, new_kid))
            elif relation == Relation.CONTRADICTS:
                if current.status == ItemStatus.VALID:
                    kr.transition_status(
                        old.kid,
                        ItemStatus.POTENTIALLY_OUTDATED,
                        now,
                        TransitionCause(relation=relation.value, other_kid=new_kid),
                    )
                    report.flagged_outdated.append(old.kid)
            elif relation == Relation.CONSISTENT:
                kr.link_items(new_kid, old.kid, now)
                report.linked.append((new_kid, old.kid))
            else:  # ambiguous: flag the old item, ask the expert which way to go
                if current.status == ItemStatus.VALID:
                    kr.transition_status(
                        old.kid,
                        ItemStatus.POTENTIALLY_OUTDATED,
                        now,
                        TransitionCause(relation=relation.value, other_kid=new_kid),
                    )
                    report.flagged_outdated.append(old.kid)
                if cost_table is None or qid_gen is None:
                    report.skipped.append(("clarification_unavailable", old.kid))
                    continue
                clar_cost = cost_table[QueryKind.ASK_CLARIFICATION]
                if ledger is not None and not ledger.can_afford(clar_cost):
                    report.skipped.append(("clarification_budget_exhausted", old.kid))
                    continue
                report.clarifications.append(
                    generate_clarification(
                        kr.get(old.kid),
                        new_kid,
                        content.text,
                        instance_snapshot,
                        instance_id,
                        preliminary,
                        cost_table,
                        qid_gen(),
                        now,
                        templates,
                    )
                )
    return report


# -- clarification resolution ---------------------------------------------------

class ClarificationResolution(str, Enum):
    SUPERSEDE_GENERAL = "supersede_general"
    CONDITIONAL_ONLY = "conditional_only"
    KEEP_OLD = "keep_old"


_KEEP_MARKERS = ("keep old", "keep the old", "still holds", "still valid", "remains valid", "keep_old")
_CONDITIONAL_MARKERS = (
    "only",
    "conditional",
    "specific conditions",
    "under these conditions",
    "context",
    "limited to",
)
_GENERAL_MARKERS = (
    "all cases",
    "outdated in all cases",
    "supersedes generally",
    "replaces the old",
    "replace the old",
    "generally",
    "discard",
    "no longer applies",
    "no longer in effect",
)


def resolve_clarification(text: str) -> ClarificationResolution:
    """Map a clarification answer onto one of the three admissible outcomes.

    Conditional markers are checked before general ones so phrasing like
    "superseded for this context only" lands on the conservative side; an
    answer matching nothing is treated as conditional (the old item stays
    flagged rather than being revived or killed).
    """
    lowered = text.lower()
    if any(marker in lowered for marker in _KEEP_MARKERS):
        return ClarificationResolution.KEEP_OLD
    if any(marker in lowered for marker in _CONDITIONAL_MARKERS):
        return ClarificationResolution.CONDITIONAL_ONLY
    if any(marker in lowered for marker in _GENERAL_MARKERS):
        return ClarificationResolution.SUPERSEDE_GENERAL
    return ClarificationResolution.CONDITIONAL_ONLY


def apply_clarification_resolution(
    resolution: ClarificationResolution,
    old_kid: str,
    new_kid: str,
    kr: KnowledgeRepository,
    now: int,
    note: Optional[str] = None,
) -> None:
    """Apply the expert's verdict on a flagged conflict pair."""
    current = kr.get(old_kid)
    if resolution == ClarificationResolution.SUPERSEDE_GENERAL:
        if current.status != ItemStatus.SUPERSEDED:
            kr.transition_status(
                old_kid,
                ItemStatus.SUPERSEDED,
                now,
                TransitionCause(relation="supersedes", other_kid=new_kid, note=note),
            )
    elif resolution == ClarificationResolution.KEEP_OLD:
        if current.status == ItemStatus.POTENTIALLY_OUTDATED:
            kr.transition_status(
                old_kid,
                ItemStatus.VALID,
                now,
                TransitionCause(relation="consistent", other_kid=new_kid, override=True, note=note),
            )
    else:  # conditional: the old item stays flagged, linked to its qualifier
        kr.link_items(old_kid, new_kid, now, note=note or "conditionally qualified")
