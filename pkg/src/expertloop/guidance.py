"""Guidance solicitation: self-dialogue, confidence, trigger, query shaping.

Before finalizing an answer the agent interrogates itself with a fixed set
of reflective questions, grades its own confidence, and only then decides
whether expert help is worth part of the remaining budget. The query kind
is chosen from the uncertainty gaps the dialogue surfaced.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

from .errors import BudgetExceeded, ConfigInvalid, Unparseable
from .llm import ChatRequest, CompletionProvider, format_options, parse_choice
from .prompts import TemplateSet, render

logger = logging.getLogger(__name__)

CONFIDENCE_LEVELS = ("High", "Moderate", "Low")

# Answer-line markers the dialogue template instructs the model to use.
_UNCERTAINTY_MARKER = re.compile(r"uncertainty:\s*(.+?)\s*(?:$)", re.IGNORECASE | re.MULTILINE)
_CONFLICT_MARKER = re.compile(r"conflict:\s*(\S.*?)\s*\|\|\s*(\S.*?)\s*(?:$)", re.IGNORECASE | re.MULTILINE)


class ConfidenceLevel(str, Enum):
    HIGH = "High"
    MODERATE = "Moderate"
    LOW = "Low"


class QueryKind(str, Enum):
    ASK_LABEL = "AskLabel"
    ASK_EXPLANATION = "AskExplanation"
    ASK_RULES = "AskRules"
    ASK_CLARIFICATION = "AskClarification"


class Decision(str, Enum):
    PREDICT_ONLY = "predict_only"
    QUERY_EXPERT = "query_expert"


@dataclass(frozen=True)
class ConflictRef:
    old_ref: str
    new_ref: str
    old_text: str = ""
    new_text: str = ""
    question: str = ""

    def to_dict(self) -> dict:
        return {
            "old_ref": self.old_ref,
            "new_ref": self.new_ref,
            "old_text": self.old_text,
            "new_text": self.new_text,
            "question": self.question,
        }


@dataclass
class SelfDialogue:
    pairs: list[tuple[str, str]]
    gaps: list[str]
    rendered: str
    conflict: Optional[ConflictRef] = None

    def to_dict(self) -> dict:
        return {
            "pairs": [[q, a] for q, a in self.pairs],
            "gaps": list(self.gaps),
            "rendered": self.rendered,
            "conflict": self.conflict.to_dict() if self.conflict else None,
        }


@dataclass(frozen=True)
class QueryPayload:
    instance_id: str
    preliminary: str
    dialogue_rendered: str = ""
    conflict: Optional[ConflictRef] = None
    question: str = ""

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "preliminary": self.preliminary,
            "dialogue_rendered": self.dialogue_rendered,
            "conflict": self.conflict.to_dict() if self.conflict else None,
            "question": self.question,
        }


@dataclass(frozen=True)
class Query:
    qid: str
    kind: QueryKind
    cost: int
    payload: QueryPayload
    issued_at: int

    def __post_init__(self):
        if self.cost < 1:
            raise ValueError("query cost must be positive")
        if (self.kind == QueryKind.ASK_CLARIFICATION) != (self.payload.conflict is not None):
            raise ValueError("conflict pair is carried exactly by clarification queries")

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "kind": self.kind.value,
            "cost": self.cost,
            "payload": self.payload.to_dict(),
            "issued_at": self.issued_at,
        }


UNIFORM_COSTS: dict[QueryKind, int] = {kind: 1 for kind in QueryKind}
TIERED_COSTS: dict[QueryKind, int] = {
    QueryKind.ASK_LABEL: 1,
    QueryKind.ASK_EXPLANATION: 2,
    QueryKind.ASK_RULES: 3,
    QueryKind.ASK_CLARIFICATION: 2,
}


def cost_table_from_raw(raw: dict[str, int]) -> dict[QueryKind, int]:
    try:
        table = {QueryKind(kind): int(cost) for kind, cost in raw.items()}
    except ValueError as exc:
        raise ConfigInvalid(f"bad cost table: {exc}") from exc
    missing = set(QueryKind) - set(table)
    if missing:
        raise ConfigInvalid(f"cost table missing kinds: {sorted(k.value for k in missing)}")
    if any(cost < 1 for cost in table.values()):
        raise ConfigInvalid("query costs must be positive integers")
    return table


@dataclass
class BudgetLedger:
    """Running account of expert-interaction spend against the total budget."""

    total: int
    spent: int = 0
    entries: list[tuple[str, QueryKind, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.total < 0:
            raise ValueError("budget must be non-negative")

    def can_afford(self, cost: int) -> bool:
        return self.spent + cost <= self.total

    def charge(self, query: Query, now: int) -> None:
        if not self.can_afford(query.cost):
            raise BudgetExceeded(
                f"charge of {query.cost} would exceed budget ({self.spent}/{self.total})"
            )
        self.entries.append((query.qid, query.kind, query.cost, now))
        self.spent += query.cost

    def counts_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, kind, _, _ in self.entries:
            out[kind.value] = out.get(kind.value, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "spent": self.spent,
            "entries": [[qid, kind.value, cost, ts] for qid, kind, cost, ts in self.entries],
        }


def render_dialogue(pairs: Sequence[tuple[str, str]]) -> str:
    blocks = []
    for question, answer in pairs:
        blocks.append(f"Q: {question}\nA: {answer}")
    return "\n\n".join(blocks)


def extract_gaps(answers: Sequence[str]) -> list[str]:
    gaps: list[str] = []
    for answer in answers:
        gaps.extend(match.strip() for match in _UNCERTAINTY_MARKER.findall(answer))
    return gaps


def extract_conflict(answers: Sequence[str]) -> Optional[ConflictRef]:
    for answer in answers:
        hit = _CONFLICT_MARKER.search(answer)
        if hit:
            return ConflictRef(old_ref=hit.group(1).strip(), new_ref=hit.group(2).strip())
    return None


def run_self_dialogue(
    fields_text: str,
    prediction: str,
    reasoning: str,
    knowledge_text: str,
    llm: CompletionProvider,
    questions: Sequence[str],
    templates: TemplateSet,
) -> SelfDialogue:
    """Ask every reflective question in order, one completion per question.

    Each call sees the case, the preliminary answer, the knowledge excerpt,
    and the dialogue so far. Gap extraction keys on the 'Uncertainty:'
    marker the template instructs the model to use.
    """
    if not questions:
        raise ConfigInvalid("reflective question set is empty")
    system, user_template = templates.pair("dialogue")
    pairs: list[tuple[str, str]] = []
    for question_template in questions:
        question = render(
            question_template,
            instance=fields_text,
            prediction=prediction,
            reasoning=reasoning,
            knowledge=knowledge_text,
        )
        prior = ""
        if pairs:
            prior = "Answers so far:\n" + render_dialogue(pairs) + "\n\n"
        user = render(
            user_template,
            question=question,
            fields=fields_text,
            prediction=prediction,
            reasoning=reasoning,
            knowledge=knowledge_text,
            prior=prior,
        )
        response = llm.complete(ChatRequest.single(system, user))
        pairs.append((question, response.text))
    answers = [answer for _, answer in pairs]
    return SelfDialogue(
        pairs=pairs,
        gaps=extract_gaps(answers),
        rendered=render_dialogue(pairs),
        conflict=extract_conflict(answers),
    )


def assess_confidence(
    dialogue: SelfDialogue, llm: CompletionProvider, templates: TemplateSet
) -> ConfidenceLevel:
    """Grade trust in the preliminary answer; unparseable replies mean Low."""
    system, user_template = templates.pair("confidence")
    user = render(user_template, dialogue=dialogue.rendered, options=format_options(CONFIDENCE_LEVELS))
    response = llm.complete(ChatRequest.single(system, user))
    try:
        return ConfidenceLevel(parse_choice(response.text, CONFIDENCE_LEVELS))
    except Unparseable:
        logger.warning("confidence reply unparseable, falling back to Low: %r", response.text[:80])
        return ConfidenceLevel.LOW


def decide_intervention(conf: ConfidenceLevel, ledger: BudgetLedger, next_cost: int) -> Decision:
    """Query the expert only when confidence is shaky and budget allows it."""
    if conf in (ConfidenceLevel.MODERATE, ConfidenceLevel.LOW) and ledger.can_afford(next_cost):
        return Decision.QUERY_EXPERT
    return Decision.PREDICT_ONLY


# Gap taxonomy: keyword families mapped to query kinds, applied in the fixed
# priority AskClarification > AskRules > AskLabel > AskExplanation.
_GAP_KEYWORDS: list[tuple[QueryKind, tuple[str, ...]]] = [
    (QueryKind.ASK_RULES, ("rule", "policy", "regulation", "guideline", "procedure", "requirement")),
    (QueryKind.ASK_LABEL, ("label", "classification", "category", "which type", "ambiguous evidence", "true answer")),
    (QueryKind.ASK_EXPLANATION, ("explanation", "justification", "rationale", "why", "reasoning")),
]

_KIND_PRIORITY = (
    QueryKind.ASK_CLARIFICATION,
    QueryKind.ASK_RULES,
    QueryKind.ASK_LABEL,
    QueryKind.ASK_EXPLANATION,
)


def classify_gap(gap: str) -> set[QueryKind]:
    lowered = gap.lower()
    kinds = set()
    for kind, keywords in _GAP_KEYWORDS:
        if any(keyword in lowered for keyword in keywords):
            kinds.add(kind)
    return kinds


def formulate_query(
    dialogue: SelfDialogue,
    instance_id: str,
    prediction: str,
    cost_table: dict[QueryKind, int],
    qid: str,
    now: int,
    allowed_kinds: Optional[Sequence[QueryKind]] = None,
) -> Query:
    """Shape the expert query from the dialogue's uncertainty gaps.

    A detected knowledge conflict always wins; otherwise the highest-priority
    kind matched by any gap. No classifiable gap at all falls back to the
    cheapest informative query, a label request.
    """
    matched: set[QueryKind] = set()
    if dialogue.conflict is not None:
        matched.add(QueryKind.ASK_CLARIFICATION)
    for gap in dialogue.gaps:
        matched.update(classify_gap(gap))

    allowed = tuple(allowed_kinds) if allowed_kinds else tuple(QueryKind)
    kind = next((k for k in _KIND_PRIORITY if k in matched and k in allowed), None)
    if kind is None:
        kind = QueryKind.ASK_LABEL if QueryKind.ASK_LABEL in allowed else min(
            allowed, key=lambda k: cost_table[k]
        )
    conflict = dialogue.conflict if kind == QueryKind.ASK_CLARIFICATION else None
    payload = QueryPayload(
        instance_id=instance_id,
        preliminary=prediction,
        dialogue_rendered=dialogue.rendered,
        conflict=conflict,
    )
    return Query(qid=qid, kind=kind, cost=cost_table[kind], payload=payload, issued_at=now)


def charge(ledger: BudgetLedger, query: Query, now: int) -> BudgetLedger:
    ledger.charge(query, now)
    return ledger
