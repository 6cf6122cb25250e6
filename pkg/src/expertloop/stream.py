"""Stream data model: instances, label spaces, drift phases, file I/O.

A stream file is line-delimited JSON, one instance per line with fields
(id, ordinal, ts, fields, truth). The truth label rides along for the
evaluation harness; the decision policy never reads it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigInvalid, InvalidPhaseSpec


@dataclass(frozen=True)
class Instance:
    id: str
    ordinal: int
    ts: int
    fields: dict[str, str]
    truth: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "ordinal": self.ordinal,
            "ts": self.ts,
            "fields": dict(self.fields),
            "truth": self.truth,
        }

    @staticmethod
    def from_dict(raw: dict) -> "Instance":
        return Instance(
            id=raw["id"],
            ordinal=int(raw["ordinal"]),
            ts=int(raw["ts"]),
            fields={str(k): str(v) for k, v in raw["fields"].items()},
            truth=str(raw["truth"]),
        )


def instance_text(x: Instance) -> str:
    """Stable text rendering of an instance's visible fields."""
    lines = [f"{key}: {x.fields[key]}" for key in sorted(x.fields)]
    return "\n".join(lines)


@dataclass(frozen=True)
class LabelSpace:
    labels: tuple[str, ...]
    default_label: Optional[str] = None

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ConfigInvalid("a label space needs at least two labels")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigInvalid("labels must be unique")
        if self.default_label is not None and self.default_label not in self.labels:
            raise ConfigInvalid("default_label must be one of the labels")

    @property
    def fallback(self) -> str:
        """Label recorded when a model reply cannot be parsed."""
        if self.default_label is not None:
            return self.default_label
        if "Non-Match" in self.labels:
            return "Non-Match"
        return self.labels[0]

    @property
    def binary(self) -> bool:
        return len(self.labels) == 2

    def positive_label(self) -> str:
        """Positive class for sensitivity/specificity in binary mode."""
        if "Match" in self.labels:
            return "Match"
        return self.labels[0]


@dataclass(frozen=True)
class PhaseSpec:
    start_ordinal: int
    label_frequency: dict[str, float]
    oracle_prompt_version: str = "v1"
    rule_overrides: Optional[dict] = None

    def __post_init__(self):
        if self.start_ordinal < 1:
            raise InvalidPhaseSpec("start_ordinal must be >= 1")
        if not self.label_frequency:
            raise InvalidPhaseSpec("label_frequency must be non-empty")
        if any(w < 0 for w in self.label_frequency.values()):
            raise InvalidPhaseSpec("label weights must be >= 0")
        if not any(w > 0 for w in self.label_frequency.values()):
            raise InvalidPhaseSpec("at least one label weight must be positive")

    def to_dict(self) -> dict:
        return {
            "start_ordinal": self.start_ordinal,
            "label_frequency": dict(self.label_frequency),
            "oracle_prompt_version": self.oracle_prompt_version,
            "rule_overrides": self.rule_overrides,
        }

    @staticmethod
    def from_dict(raw: dict) -> "PhaseSpec":
        return PhaseSpec(
            start_ordinal=int(raw["start_ordinal"]),
            label_frequency={str(k): float(v) for k, v in raw["label_frequency"].items()},
            oracle_prompt_version=raw.get("oracle_prompt_version", "v1"),
            rule_overrides=raw.get("rule_overrides"),
        )


def validate_phases(phases: list[PhaseSpec]) -> list[PhaseSpec]:
    if not phases:
        raise InvalidPhaseSpec("need at least one phase")
    ordinals = [p.start_ordinal for p in phases]
    if ordinals != sorted(ordinals) or len(set(ordinals)) != len(ordinals):
        raise InvalidPhaseSpec("phases must be strictly ordered by start_ordinal")
    if phases[0].start_ordinal != 1:
        raise InvalidPhaseSpec("the first phase must start at ordinal 1")
    return phases


def phase_for(phases: list[PhaseSpec], ordinal: int) -> PhaseSpec:
    current = phases[0]
    for phase in phases:
        if phase.start_ordinal <= ordinal:
            current = phase
        else:
            break
    return current


def write_stream(path: str | Path, instances: Iterable[Instance]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for x in instances:
            fh.write(json.dumps(x.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def load_stream(path: str | Path) -> list[Instance]:
    instances: list[Instance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                instances.append(Instance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigInvalid(f"bad stream line: {line[:120]!r}") from exc
    for prev, cur in zip(instances, instances[1:]):
        if cur.ordinal <= prev.ordinal:
            raise ConfigInvalid(f"stream ordinals must strictly increase ({prev.ordinal} -> {cur.ordinal})")
    return instances
