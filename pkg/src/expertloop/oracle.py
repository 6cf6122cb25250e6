"""Expert oracle adapters: scripted ground truth, simulated expert, human queue.

The scripted adapter is a pure function of its tables and replays
identically; the simulated adapter wraps a completion provider behind a
per-phase persona prompt (labels always come from the truth table); the
human adapter parks queries on a queue the service exposes and blocks the
run loop until an answer arrives or the wait times out.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

from .errors import AnswerConflict, MissingGroundTruth, OracleTimeout
from .guidance import Query, QueryKind
from .llm import ChatRequest, CompletionProvider
from .prompts import TemplateSet, render
from .stream import Instance, instance_text


@dataclass(frozen=True)
class OracleFeedback:
    qid: str
    text: str
    label: Optional[str] = None
    answered_at: int = 0
    source: str = "scripted"  # scripted | llm | human

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "text": self.text,
            "label": self.label,
            "answered_at": self.answered_at,
            "source": self.source,
        }


class Oracle(Protocol):
    def answer(self, x: Instance, query: Query, now: int) -> OracleFeedback: ...


# -- scripted adapter ---------------------------------------------------------

@dataclass
class RuleVersion:
    from_ordinal: int
    text: str


@dataclass
class ClarificationRule:
    old_pattern: str
    new_pattern: str
    text: str


@dataclass
class ScriptedOracleTable:
    """Ground truth plus canned rule/explanation/clarification material.

    ``truth`` maps instance id to (label, rule ids); ``rules`` maps rule id
    to its versions ordered by the ordinal they take effect at, so drift
    phases can swap rule texts without touching the adapter.
    """

    truth: dict[str, tuple[str, tuple[str, ...]]] = field(default_factory=dict)
    rules: dict[str, list[RuleVersion]] = field(default_factory=dict)
    explanations: dict[str, str] = field(default_factory=dict)
    clarifications: list[ClarificationRule] = field(default_factory=list)
    default_clarification: Optional[str] = None

    def rule_text(self, rule_id: str, ordinal: int) -> str:
        versions = self.rules.get(rule_id)
        if not versions:
            raise MissingGroundTruth(f"no rule material for {rule_id}")
        active = None
        for version in versions:
            if version.from_ordinal <= ordinal:
                active = version
        if active is None:
            raise MissingGroundTruth(f"rule {rule_id} has no version active at ordinal {ordinal}")
        return active.text

    # - file I/O -

    def write(self, truth_path: str | Path, pack_path: str | Path) -> None:
        truth_path, pack_path = Path(truth_path), Path(pack_path)
        truth_path.parent.mkdir(parents=True, exist_ok=True)
        with open(truth_path, "w", encoding="utf-8") as fh:
            for iid, (label, rule_ids) in self.truth.items():
                fh.write(json.dumps({"id": iid, "label": label, "rule_ids": list(rule_ids)}) + "\n")
        pack = {
            "rules": {
                rid: [{"from_ordinal": v.from_ordinal, "text": v.text} for v in versions]
                for rid, versions in self.rules.items()
            },
            "explanations": self.explanations,
            "clarifications": [
                {"old_pattern": c.old_pattern, "new_pattern": c.new_pattern, "text": c.text}
                for c in self.clarifications
            ],
            "default_clarification": self.default_clarification,
        }
        with open(pack_path, "w", encoding="utf-8") as fh:
            json.dump(pack, fh, indent=2, ensure_ascii=False)

    @staticmethod
    def load(truth_path: str | Path, pack_path: str | Path | None = None) -> "ScriptedOracleTable":
        table = ScriptedOracleTable()
        with open(truth_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                raw = json.loads(line)
                table.truth[raw["id"]] = (raw["label"], tuple(raw.get("rule_ids", ())))
        if pack_path is not None:
            with open(pack_path, "r", encoding="utf-8") as fh:
                pack = json.load(fh)
            table.rules = {
                rid: [RuleVersion(int(v["from_ordinal"]), v["text"]) for v in versions]
                for rid, versions in pack.get("rules", {}).items()
            }
            table.explanations = dict(pack.get("explanations", {}))
            table.clarifications = [
                ClarificationRule(c["old_pattern"], c["new_pattern"], c["text"])
                for c in pack.get("clarifications", ())
            ]
            table.default_clarification = pack.get("default_clarification")
        return table


class ScriptedOracle:
    def __init__(self, table: ScriptedOracleTable):
        self.table = table

    def _truth_for(self, x: Instance) -> tuple[str, tuple[str, ...]]:
        try:
            return self.table.truth[x.id]
        except KeyError:
            raise MissingGroundTruth(f"no ground truth for instance {x.id}") from None

    def answer(self, x: Instance, query: Query, now: int) -> OracleFeedback:
        if query.kind == QueryKind.ASK_LABEL:
            label, _ = self._truth_for(x)
            return OracleFeedback(qid=query.qid, text=f"True label: {label}.", label=label, answered_at=now)
        if query.kind == QueryKind.ASK_RULES:
            _, rule_ids = self._truth_for(x)
            if not rule_ids:
                raise MissingGroundTruth(f"no rules recorded for instance {x.id}")
            texts = [self.table.rule_text(rid, x.ordinal) for rid in rule_ids]
            return OracleFeedback(qid=query.qid, text="\n".join(texts), answered_at=now)
        if query.kind == QueryKind.ASK_EXPLANATION:
            label, _ = self._truth_for(x)
            template = self.table.explanations.get(label)
            if template is None:
                raise MissingGroundTruth(f"no explanation material for label {label}")
            text = template.format(id=x.id, label=label, fields=instance_text(x))
            return OracleFeedback(qid=query.qid, text=text, answered_at=now)
        # Clarification: keyed by patterns over the conflicting texts.
        conflict = query.payload.conflict
        old_text = conflict.old_text if conflict else ""
        new_text = conflict.new_text if conflict else ""
        for rule in self.table.clarifications:
            if rule.old_pattern in old_text and rule.new_pattern in new_text:
                return OracleFeedback(qid=query.qid, text=rule.text, answered_at=now)
        if self.table.default_clarification:
            return OracleFeedback(qid=query.qid, text=self.table.default_clarification, answered_at=now)
        raise MissingGroundTruth("no scripted clarification matches the conflict pair")


# -- simulated-expert adapter -------------------------------------------------

class LLMOracle:
    """Expert simulated by a completion provider under a persona prompt.

    Label queries bypass the model and come straight from the truth table;
    everything else is generated under the persona for the phase the
    instance falls in, so swapping the prompt version changes rule guidance
    across a phase boundary and nothing else.
    """

    def __init__(
        self,
        provider: CompletionProvider,
        truth: dict[str, tuple[str, tuple[str, ...]]],
        templates: TemplateSet,
        persona_template: str,
        version_for_ordinal: Callable[[int], str] = lambda _: "v1",
    ):
        self.provider = provider
        self.truth = truth
        self.templates = templates
        self.persona_template = persona_template
        self.version_for_ordinal = version_for_ordinal

    def _persona(self, ordinal: int) -> str:
        return render(self.persona_template, version=self.version_for_ordinal(ordinal))

    def answer(self, x: Instance, query: Query, now: int) -> OracleFeedback:
        if query.kind == QueryKind.ASK_LABEL:
            if x.id not in self.truth:
                raise MissingGroundTruth(f"no ground truth for instance {x.id}")
            label = self.truth[x.id][0]
            return OracleFeedback(
                qid=query.qid, text=f"True label: {label}.", label=label, answered_at=now, source="llm"
            )
        persona = self._persona(x.ordinal)
        if query.kind == QueryKind.ASK_EXPLANATION:
            label = self.truth.get(x.id, ("", ()))[0]
            user = render(self.templates.text("oracle_explanation"), label=label, fields=instance_text(x))
        elif query.kind == QueryKind.ASK_RULES:
            label = self.truth.get(x.id, ("", ()))[0]
            user = render(self.templates.text("oracle_rules"), label=label, fields=instance_text(x))
        else:
            conflict = query.payload.conflict
            user = render(
                self.templates.text("oracle_clarification"),
                instance=instance_text(x),
                old_text=conflict.old_text if conflict else "",
                new_text=conflict.new_text if conflict else "",
            )
        response = self.provider.complete(ChatRequest.single(persona, user))
        return OracleFeedback(qid=query.qid, text=response.text, answered_at=now, source="llm")


# -- human adapter ------------------------------------------------------------

@dataclass
class PendingQuery:
    query: Query
    instance_snapshot: dict
    dialogue_snapshot: str
    enqueued_at: int
    status: str = "pending"  # pending | answered | expired
    feedback: Optional[OracleFeedback] = None

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "instance_snapshot": self.instance_snapshot,
            "dialogue_snapshot": self.dialogue_snapshot,
            "enqueued_at": self.enqueued_at,
            "status": self.status,
        }


class HumanOracleQueue:
    """Thread-safe pending-query queue with compare-and-set answer resolution."""

    def __init__(self):
        self._cond = threading.Condition()
        self._pending: dict[str, PendingQuery] = {}

    def enqueue(self, query: Query, instance_snapshot: dict, dialogue_snapshot: str, now: int) -> PendingQuery:
        with self._cond:
            entry = PendingQuery(
                query=query,
                instance_snapshot=instance_snapshot,
                dialogue_snapshot=dialogue_snapshot,
                enqueued_at=now,
            )
            self._pending[query.qid] = entry
            self._cond.notify_all()
            return entry

    def submit_answer(self, qid: str, text: str, label: Optional[str], now: int) -> OracleFeedback:
        """First answer wins; later submissions hit AnswerConflict."""
        with self._cond:
            entry = self._pending.get(qid)
            if entry is None:
                raise KeyError(qid)
            if entry.status != "pending":
                raise AnswerConflict(f"query {qid} already {entry.status}")
            feedback = OracleFeedback(qid=qid, text=text, label=label, answered_at=now, source="human")
            entry.status = "answered"
            entry.feedback = feedback
            self._cond.notify_all()
            return feedback

    def await_answer(self, qid: str, timeout_s: float) -> OracleFeedback:
        """Block until the query is answered; expire it on timeout."""
        import time as _time

        end = _time.monotonic() + timeout_s
        with self._cond:
            while True:
                entry = self._pending.get(qid)
                if entry is None:
                    raise KeyError(qid)
                if entry.status == "answered" and entry.feedback is not None:
                    return entry.feedback
                if entry.status == "expired":
                    raise OracleTimeout(f"query {qid} expired")
                remaining = end - _time.monotonic()
                if remaining <= 0:
                    entry.status = "expired"
                    self._cond.notify_all()
                    raise OracleTimeout(f"no expert answer for {qid} within {timeout_s}s")
                self._cond.wait(timeout=remaining)

    def list_pending(self) -> list[PendingQuery]:
        with self._cond:
            return [entry for entry in self._pending.values() if entry.status == "pending"]

    def get(self, qid: str) -> Optional[PendingQuery]:
        with self._cond:
            return self._pending.get(qid)


class HumanOracle:
    """Blocks the run loop on the queue until an expert answers (bounded)."""

    def __init__(self, queue: HumanOracleQueue, timeout_s: float = 600.0):
        self.queue = queue
        self.timeout_s = timeout_s

    def answer(self, x: Instance, query: Query, now: int) -> OracleFeedback:
        self.queue.enqueue(query, x.to_dict() | {"truth": "<hidden>"}, query.payload.dialogue_rendered, now)
        return self.queue.await_answer(query.qid, self.timeout_s)
