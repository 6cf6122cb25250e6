"""Seeded stream generators: phase-based drift streams and the rule domain.

Everything is driven by one ``random.Random(seed)`` so the same seed always
yields byte-identical stream and oracle files. The rule-domain generator
doubles as its own oracle: the canonical rule texts it emits are exactly
what the scripted oracle hands back for rule queries.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .errors import InvalidPhaseSpec
from .mockllm import rule_sentence
from .oracle import ClarificationRule, RuleVersion, ScriptedOracleTable
from .stream import Instance, PhaseSpec, phase_for, validate_phases

DEFAULT_STEP_S = 60  # logical clock: one instance per minute


def _sample_label(rng: random.Random, frequency: dict[str, float]) -> str:
    labels = sorted(frequency)
    weights = [frequency[label] for label in labels]
    return rng.choices(labels, weights=weights, k=1)[0]


@dataclass
class DriftStreamConfig:
    n: int
    labels: list[str]
    field_templates: dict[str, dict[str, str]]  # label -> {field: template}
    start_ts: int = 0
    step_s: int = DEFAULT_STEP_S

    def template_for(self, label: str) -> dict[str, str]:
        if label in self.field_templates:
            return self.field_templates[label]
        return {"summary": "case {ordinal} ({label}) token {nonce}"}


def make_drift_stream(
    phases: list[PhaseSpec], config: DriftStreamConfig, seed: int
) -> tuple[list[Instance], ScriptedOracleTable]:
    """Sample a phase-governed stream plus the matching scripted oracle table.

    Labels are drawn per the active phase's frequencies; instance fields come
    from per-label templates. The oracle table carries per-label explanation
    templates and one canonical rule per label, with per-phase overrides
    applied as new rule versions starting at the phase boundary.
    """
    validate_phases(phases)
    for phase in phases:
        unknown = set(phase.label_frequency) - set(config.labels)
        if unknown:
            raise InvalidPhaseSpec(f"phase at {phase.start_ordinal} weights unknown labels {sorted(unknown)}")
    rng = random.Random(seed)
    table = ScriptedOracleTable()
    for label in config.labels:
        rid = f"rule-{label}"
        table.rules[rid] = [RuleVersion(1, f"Cases of kind {label} are labeled {label} by definition.")]
        table.explanations[label] = "Case {id} is labeled {label} because its generated fields follow the {label} template."
    for phase in phases:
        for rid, text in (phase.rule_overrides or {}).items():
            table.rules.setdefault(rid, []).append(RuleVersion(phase.start_ordinal, str(text)))
    table.default_clarification = "Treat the newer guidance as authoritative in all cases; the older statement no longer applies."

    instances = []
    for ordinal in range(1, config.n + 1):
        phase = phase_for(phases, ordinal)
        label = _sample_label(rng, phase.label_frequency)
        nonce = f"{rng.randrange(16**6):06x}"
        fields = {
            key: template.format(ordinal=ordinal, label=label, nonce=nonce)
            for key, template in config.template_for(label).items()
        }
        iid = f"s{ordinal:05d}"
        instances.append(
            Instance(
                id=iid,
                ordinal=ordinal,
                ts=config.start_ts + (ordinal - 1) * config.step_s,
                fields=fields,
                truth=label,
            )
        )
        table.truth[iid] = (label, (f"rule-{label}",))
    return instances, table


# -- synthetic rule-discovery domain -------------------------------------------

RULE_LABELS = ("Match", "Non-Match")


@dataclass
class RuleDomainSpec:
    """Hidden-rule task: each case bears a marker; a per-marker rule fixes its label.

    A correct decision requires the marker's rule text to be in the agent's
    knowledge context, so accuracy tracks how much of the rule set has been
    learned. An optional flip inverts one marker's rule at ``flip_ordinal``
    (cases of that marker then cite revision 2).
    """

    n: int = 500
    n_rules: int = 10
    seed: int = 20240601
    flip_ordinal: int | None = None
    flip_marker: str = "R1"
    start_ts: int = 0
    step_s: int = DEFAULT_STEP_S

    markers: list[str] = field(init=False)

    def __post_init__(self):
        if self.n_rules < 1:
            raise InvalidPhaseSpec("need at least one rule")
        self.markers = [f"R{i}" for i in range(self.n_rules)]
        if self.flip_ordinal is not None and self.flip_marker not in self.markers:
            raise InvalidPhaseSpec(f"flip marker {self.flip_marker} outside marker set")

    def base_label(self, marker: str) -> str:
        return RULE_LABELS[int(marker[1:]) % 2]

    def label_at(self, marker: str, ordinal: int) -> str:
        if self.flip_ordinal is not None and marker == self.flip_marker and ordinal >= self.flip_ordinal:
            base = self.base_label(marker)
            return RULE_LABELS[1 - RULE_LABELS.index(base)]
        return self.base_label(marker)

    def rev_at(self, marker: str, ordinal: int) -> int:
        if self.flip_ordinal is not None and marker == self.flip_marker and ordinal >= self.flip_ordinal:
            return 2
        return 1


def make_rule_discovery_task(spec: RuleDomainSpec) -> tuple[list[Instance], ScriptedOracleTable, list[PhaseSpec]]:
    """Generate the rule-domain stream, its oracle table, and its phases."""
    rng = random.Random(spec.seed)
    table = ScriptedOracleTable()
    for marker in spec.markers:
        versions = [RuleVersion(1, rule_sentence(marker, 1, spec.base_label(marker)))]
        if spec.flip_ordinal is not None and marker == spec.flip_marker:
            flipped = spec.label_at(marker, spec.flip_ordinal)
            versions.append(RuleVersion(spec.flip_ordinal, rule_sentence(marker, 2, flipped)))
        table.rules[marker] = versions
    for label in RULE_LABELS:
        table.explanations[label] = "Case {id} is labeled {label} because the screening rule for its marker says so."
    table.clarifications = [
        ClarificationRule(
            old_pattern="Screening rule",
            new_pattern="Screening rule",
            text="The newer revision applies in all cases; the earlier revision no longer applies.",
        )
    ]
    table.default_clarification = "Treat the newer guidance as authoritative in all cases."

    instances = []
    for ordinal in range(1, spec.n + 1):
        marker = spec.markers[rng.randrange(spec.n_rules)]
        rev = spec.rev_at(marker, ordinal)
        label = spec.label_at(marker, ordinal)
        nonce = f"{rng.randrange(16**6):06x}"
        iid = f"s{ordinal:05d}"
        instances.append(
            Instance(
                id=iid,
                ordinal=ordinal,
                ts=spec.start_ts + (ordinal - 1) * spec.step_s,
                fields={
                    "marker": marker,
                    "rev": str(rev),
                    "case": f"case {ordinal} subject {marker}-{nonce}",
                },
                truth=label,
            )
        )
        table.truth[iid] = (label, (marker,))

    phases = [PhaseSpec(start_ordinal=1, label_frequency={lab: 1.0 for lab in RULE_LABELS})]
    if spec.flip_ordinal is not None:
        phases.append(
            PhaseSpec(
                start_ordinal=spec.flip_ordinal,
                label_frequency={lab: 1.0 for lab in RULE_LABELS},
                oracle_prompt_version="v2",
                rule_overrides={spec.flip_marker: rule_sentence(spec.flip_marker, 2, spec.label_at(spec.flip_marker, spec.flip_ordinal))},
            )
        )
    return instances, table, phases
