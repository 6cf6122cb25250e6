"""Versioned prompt/template data files and their loader.

Templates live under ``prompts/<version>/`` so a drift phase or a provider
change can swap the whole set without touching code. Loading validates that
every placeholder a template uses is one the runtime knows how to fill.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from importlib import resources

from ..errors import ConfigInvalid

_PLACEHOLDER = re.compile(r"{([a-zA-Z_]+)}")

# Placeholders the runtime can fill, per template.
_KNOWN_FIELDS = {
    "predict.system": set(),
    "predict.user": {"fields", "knowledge", "labels"},
    "dialogue.system": set(),
    "dialogue.user": {"question", "fields", "prediction", "reasoning", "knowledge", "prior"},
    "confidence.system": set(),
    "confidence.user": {"dialogue", "options"},
    "extract.system": set(),
    "extract.user": {"feedback", "query_kind", "fields", "prediction"},
    "relation.system": set(),
    "relation.user": {"new_text", "old_text"},
    "probe.system": set(),
    "probe.user": {"fields", "prediction", "reasoning"},
    "clarification_question": {"old_kid", "old_text", "new_kid", "new_text", "instance"},
    "oracle_explanation": {"label", "fields"},
    "oracle_rules": {"label", "fields"},
    "oracle_clarification": {"instance", "old_text", "new_text"},
}

QUESTION_FIELDS = {"instance", "prediction", "reasoning", "knowledge"}


def _check_placeholders(name: str, text: str, allowed: set[str]) -> None:
    used = set(_PLACEHOLDER.findall(text))
    unknown = used - allowed
    if unknown:
        raise ConfigInvalid(f"template {name!r} uses unknown placeholders: {sorted(unknown)}")


def render(template: str, **context: str) -> str:
    """Fill a template, failing loudly on unresolved placeholders."""
    try:
        return template.format(**context)
    except (KeyError, IndexError) as exc:
        raise ConfigInvalid(f"unresolved placeholder {exc} in template") from exc


@dataclass(frozen=True)
class TemplateSet:
    version: str
    raw: dict

    def pair(self, name: str) -> tuple[str, str]:
        entry = self.raw[name]
        return entry["system"], entry["user"]

    def text(self, name: str) -> str:
        return self.raw[name]

    def schema_hint(self, name: str) -> str | None:
        entry = self.raw.get(name)
        if isinstance(entry, dict):
            return entry.get("schema_hint")
        return None


def _read_resource(version: str, filename: str) -> str:
    ref = resources.files(__package__).joinpath(version).joinpath(filename)
    try:
        return ref.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"missing prompt resource {version}/{filename}") from exc


def load_templates(version: str = "v1") -> TemplateSet:
    raw = json.loads(_read_resource(version, "templates.json"))
    for name, allowed in _KNOWN_FIELDS.items():
        if "." in name:
            top, part = name.split(".", 1)
            if top not in raw:
                raise ConfigInvalid(f"template set {version} is missing {top!r}")
            _check_placeholders(name, raw[top][part], allowed)
        else:
            if name not in raw:
                raise ConfigInvalid(f"template set {version} is missing {name!r}")
            _check_placeholders(name, raw[name], allowed)
    return TemplateSet(version=version, raw=raw)


def load_questions(version: str = "v1", filename: str = "questions_default.txt") -> list[str]:
    """Load a reflective question set; validates placeholders at load time."""
    questions = []
    for line in _read_resource(version, filename).splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        _check_placeholders(filename, line, QUESTION_FIELDS)
        questions.append(line)
    if not questions:
        raise ConfigInvalid(f"question set {filename} is empty")
    return questions


def load_questions_file(path: str) -> list[str]:
    questions = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            _check_placeholders(path, line, QUESTION_FIELDS)
            questions.append(line)
    if not questions:
        raise ConfigInvalid(f"question set {path} is empty")
    return questions


def load_cost_table(version: str, mode: str) -> dict[str, int]:
    filename = {"uniform": "costs_uniform.json", "cuad": "costs_cuad.json"}.get(mode)
    if filename is None:
        raise ConfigInvalid(f"no built-in cost table for mode {mode!r}")
    return {k: int(v) for k, v in json.loads(_read_resource(version, filename)).items()}


def load_persona(version: str = "v1") -> str:
    return _read_resource(version, "persona_default.txt")
