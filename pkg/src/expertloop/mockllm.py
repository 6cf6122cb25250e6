"""Deterministic in-process model double for the synthetic rule domain.

The double behaves like an agent that can only decide a case correctly when
the governing screening rule is present in its prompt context: it reads the
case marker and revision out of the prompt, looks for matching rule texts
in the rendered knowledge block, and answers accordingly. All other
template calls (reflection, confidence, extraction, relation, probe) are
keyed off template sentinels. Same prompt, same reply, always.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .llm import ChatRequest, ChatResponse

RULE_TEXT_RE = re.compile(
    r"Screening rule (R\d+) revision (\d+): cases bearing marker (R\d+) are (Match|Non-Match)\."
)
_MARKER_FIELD = re.compile(r"^marker: (\S+)$", re.MULTILINE)
_REV_FIELD = re.compile(r"^rev: (\S+)$", re.MULTILINE)
_TRUE_LABEL = re.compile(r"True label: (Match|Non-Match)\.")
_FULL_RULE_SENTENCE = re.compile(
    r"Screening rule R\d+ revision \d+: cases bearing marker R\d+ are (?:Match|Non-Match)\."
    r"(?: Revision \d+ is no longer in effect\.)?"
)

DEFAULT_LABEL = "Non-Match"


def rule_sentence(marker: str, rev: int, label: str) -> str:
    text = f"Screening rule {marker} revision {rev}: cases bearing marker {marker} are {label}."
    if rev > 1:
        text += f" Revision {rev - 1} is no longer in effect."
    return text


@dataclass
class _CaseView:
    marker: str | None
    rev: str | None
    rules: list[tuple[str, str, str]]  # (marker, rev, label) found in context

    @property
    def marker_rules(self) -> list[tuple[str, str, str]]:
        return [r for r in self.rules if r[0] == self.marker]

    @property
    def labels_for_marker(self) -> set[str]:
        return {label for _, _, label in self.marker_rules}

    @property
    def conflicting(self) -> bool:
        return len(self.labels_for_marker) > 1

    @property
    def applicable(self) -> bool:
        if self.conflicting:
            return False
        return any(rev == self.rev for _, rev, _ in self.marker_rules)


def _view(text: str) -> _CaseView:
    marker = _MARKER_FIELD.search(text)
    rev = _REV_FIELD.search(text)
    rules = [(m, r, label) for m, r, _, label in RULE_TEXT_RE.findall(text)]
    return _CaseView(
        marker=marker.group(1) if marker else None,
        rev=rev.group(1) if rev else None,
        rules=rules,
    )


class RuleDomainProvider:
    """Completion provider simulating an agent over the synthetic rule domain."""

    def __init__(self):
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        text = request.system + "\n" + "\n".join(turn.text for turn in request.turns)
        return ChatResponse(text=self._respond(text), latency_ms=0)

    def _respond(self, text: str) -> str:
        if "Allowed labels:" in text:
            return self._predict(_view(text))
        if "Reflective question:" in text:
            return self._reflect(_view(text))
        if "Self-review transcript:" in text:
            return "[C] Low confidence: unresolved knowledge gaps." if "Uncertainty:" in text else "[A] High confidence."
        if "numbered assertions" in text:
            return self._extract(text)
        if "[A] contradicts" in text:
            return self._relation(text)
        if "probability between 0 and 1" in text:
            view = _view(text)
            return "0.95" if view.applicable else "0.15"
        return "Unrecognized request."

    def _predict(self, view: _CaseView) -> str:
        if view.marker is None:
            return f"{DEFAULT_LABEL}\nNo case marker found; defaulting."
        if not view.marker_rules:
            return f"{DEFAULT_LABEL}\nNo recorded rule covers marker {view.marker}; defaulting to the conservative label."
        if view.conflicting:
            return (
                f"{DEFAULT_LABEL}\nConflicting recorded rules for marker {view.marker} "
                "prevent a determination; defaulting to the conservative label."
            )
        label = next(iter(view.labels_for_marker))
        return f"{label}\nThe recorded screening rule for marker {view.marker} applies directly."

    def _reflect(self, view: _CaseView) -> str:
        if view.marker is None:
            return "Uncertainty: the case carries no recognizable marker."
        if view.conflicting:
            return (
                f"Uncertainty: conflicting policy rules are recorded for marker {view.marker}; "
                "the currently effective revision is unclear."
            )
        if not view.applicable:
            return (
                f"Uncertainty: I lack the current policy rule for marker {view.marker} "
                f"revision {view.rev}."
            )
        return (
            f"The recorded screening rule for marker {view.marker} revision {view.rev} "
            "covers this case; no gaps identified."
        )

    def _extract(self, text: str) -> str:
        lines = []
        for sentence in _FULL_RULE_SENTENCE.findall(text.split("Expert feedback:", 1)[-1]):
            lines.append(f"{len(lines) + 1}. [rule] {sentence}")
        label_hit = _TRUE_LABEL.search(text)
        if label_hit:
            lines.append(
                f"{len(lines) + 1}. [exemplar label={label_hit.group(1)}] "
                f"Reviewed case confirmed as {label_hit.group(1)}."
            )
        return "\n".join(lines) if lines else "(no assertions)"

    def _relation(self, text: str) -> str:
        try:
            new_part = text.split("New knowledge:", 1)[1].split("Existing knowledge:", 1)[0]
            old_part = text.split("Existing knowledge:", 1)[1]
        except IndexError:
            return "[D] consistent"
        new_rule = RULE_TEXT_RE.search(new_part)
        old_rule = RULE_TEXT_RE.search(old_part)
        if not new_rule or not old_rule:
            return "[D] consistent"
        new_marker, new_rev, _, new_label = new_rule.groups()
        old_marker, old_rev, _, old_label = old_rule.groups()
        if new_marker != old_marker:
            return "[D] consistent"
        if new_rev == old_rev:
            return "[D] consistent" if new_label == old_label else "[A] contradicts"
        if int(new_rev) > int(old_rev):
            return "[B] supersedes"
        return "[E] ambiguous"
