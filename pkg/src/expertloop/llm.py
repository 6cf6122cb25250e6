"""Completion gateway: one request/response contract, several providers.

Providers: a scripted double keyed by request fingerprints or match
patterns (the workhorse for deterministic tests and replayable runs) and an
HTTP adapter speaking the common chat-completions wire shape with bounded
retry. Fingerprints are stable 64-bit digests of the canonicalized request.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .errors import (
    ProviderRefusal,
    ProviderTimeout,
    RateLimited,
    ScriptMiss,
    TransportError,
    Unparseable,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_BASE_S = 0.5


@dataclass(frozen=True)
class ChatTurn:
    role: str  # "user" | "assistant"
    text: str


@dataclass(frozen=True)
class ChatRequest:
    system: str
    turns: tuple[ChatTurn, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    schema_hint: Optional[str] = None

    def __post_init__(self):
        if not self.turns:
            raise ValueError("a chat request needs at least one turn")
        if self.turns[-1].role != "user":
            raise ValueError("the final turn must come from the user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    @staticmethod
    def single(system: str, user_text: str, **kwargs) -> "ChatRequest":
        return ChatRequest(system=system, turns=(ChatTurn("user", user_text),), **kwargs)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency_ms: int = 0
    token_counts: Optional[dict] = None


def _norm(text: str) -> str:
    return " ".join(text.split())


def canonical_text(request: ChatRequest) -> str:
    """Whitespace-normalized rendering with fields in a fixed order."""
    parts = [f"system={_norm(request.system)}"]
    for turn in request.turns:
        parts.append(f"{turn.role}={_norm(turn.text)}")
    parts.append(f"temperature={request.temperature!r}")
    parts.append(f"max_tokens={request.max_tokens}")
    parts.append(f"schema_hint={_norm(request.schema_hint) if request.schema_hint else ''}")
    return "\x1f".join(parts)


def fingerprint(request: ChatRequest) -> str:
    """Stable 64-bit digest of the canonicalized request, as 16 hex chars."""
    digest = hashlib.blake2b(canonical_text(request).encode("utf-8"), digest_size=8)
    return digest.hexdigest()


class CompletionProvider(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


# -- choice parsing -----------------------------------------------------------

_BRACKET = re.compile(r"\[([A-Za-z])\]")


def format_options(allowed: Sequence[str]) -> str:
    """Render labels as bracketed options ([A] first, [B] second, ...)."""
    letters = string.ascii_uppercase
    return "\n".join(f"[{letters[i]}] {label}" for i, label in enumerate(allowed))


def parse_choice(text: str, allowed: Sequence[str]) -> str:
    """Map a free-text response onto one allowed label.

    A bracketed option letter ([A]/[B]/...) wins and is mapped positionally;
    otherwise the earliest case-insensitive occurrence of an allowed label
    (longest label on position ties) is taken. Anything else is unparseable.
    """
    if not allowed:
        raise ValueError("allowed label set must be non-empty")
    for match in _BRACKET.finditer(text):
        index = string.ascii_uppercase.index(match.group(1).upper())
        if index < len(allowed):
            return allowed[index]
    best: tuple[int, int, str] | None = None  # (position, -len, label)
    lowered = text.lower()
    for label in allowed:
        pattern = re.compile(r"(?<![a-z0-9])" + re.escape(label.lower()) + r"(?![a-z0-9])")
        hit = pattern.search(lowered)
        if hit is None:
            continue
        key = (hit.start(), -len(label), label)
        if best is None or key < best:
            best = key
    if best is not None:
        return best[2]
    raise Unparseable(f"no allowed label in response: {text[:120]!r}")


# -- scripted provider --------------------------------------------------------

@dataclass
class ScriptEntry:
    response: str
    fingerprint: Optional[str] = None
    pattern: Optional[str] = None  # substring matched against the canonical text


class ScriptedProvider:
    """Deterministic double: responses keyed by fingerprint or pattern.

    Misses raise so a test script must cover every call the run makes; this
    is what keeps scripted runs bit-reproducible.
    """

    def __init__(self, entries: Sequence[ScriptEntry] = ()):
        self._by_fingerprint: dict[str, str] = {}
        self._patterns: list[tuple[str, str]] = []
        self.calls = 0
        for entry in entries:
            self.add_entry(entry)

    def add_entry(self, entry: ScriptEntry) -> None:
        if entry.fingerprint:
            self._by_fingerprint[entry.fingerprint] = entry.response
        elif entry.pattern:
            self._patterns.append((entry.pattern, entry.response))
        else:
            raise ValueError("script entry needs a fingerprint or a pattern")

    def add_response(self, request: ChatRequest, response: str) -> None:
        self._by_fingerprint[fingerprint(request)] = response

    def add_pattern(self, pattern: str, response: str) -> None:
        self._patterns.append((pattern, response))

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        fp = fingerprint(request)
        if fp in self._by_fingerprint:
            return ChatResponse(text=self._by_fingerprint[fp], latency_ms=0)
        canon = canonical_text(request)
        for pattern, response in self._patterns:
            if pattern in canon:
                return ChatResponse(text=response, latency_ms=0)
        raise ScriptMiss(f"no scripted response for request: {canon[:200]!r}", fingerprint=fp)

    @staticmethod
    def from_file(path: str | Path) -> "ScriptedProvider":
        """Load line-delimited JSON entries of (fingerprint|pattern, response)."""
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                raw = json.loads(line)
                entries.append(
                    ScriptEntry(
                        response=raw["response"],
                        fingerprint=raw.get("fingerprint"),
                        pattern=raw.get("pattern"),
                    )
                )
        return ScriptedProvider(entries)


class CallableProvider:
    """Adapter for deterministic in-process doubles implemented as functions."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self._fn = fn
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        return ChatResponse(text=self._fn(request), latency_ms=0)


# -- HTTP adapter -------------------------------------------------------------

@dataclass
class HttpProviderConfig:
    base_url: str
    model: str
    api_token: Optional[str] = None
    timeout_s: float = 30.0
    max_retries: int = DEFAULT_MAX_RETRIES
    backoff_base_s: float = DEFAULT_BACKOFF_BASE_S
    max_in_flight: int = 4


class HttpProvider:
    """Chat-completions adapter with bounded retry and exponential backoff.

    Transient failures (transport errors, timeouts, 429, 5xx) are retried up
    to the configured bound; the final failure is raised with the request
    fingerprint attached for log correlation.
    """

    def __init__(self, config: HttpProviderConfig, sleep: Callable[[float], None] = time.sleep):
        import httpx
        import threading

        self.config = config
        self._sleep = sleep
        self._semaphore = threading.Semaphore(config.max_in_flight)
        headers = {"Content-Type": "application/json"}
        if config.api_token:
            headers["Authorization"] = f"Bearer {config.api_token}"
        self._client = httpx.Client(base_url=config.base_url, timeout=config.timeout_s, headers=headers)

    def close(self) -> None:
        self._client.close()

    def complete(self, request: ChatRequest) -> ChatResponse:
        import httpx

        fp = fingerprint(request)
        messages = [{"role": "system", "content": request.system}]
        messages += [{"role": t.role, "content": t.text} for t in request.turns]
        body = {
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                self._sleep(self.config.backoff_base_s * (2 ** (attempt - 1)))
            started = time.perf_counter()
            try:
                with self._semaphore:
                    resp = self._client.post("/chat/completions", json=body)
            except httpx.TimeoutException as exc:
                last_error = ProviderTimeout(f"request timed out: {exc}", fingerprint=fp)
                continue
            except httpx.HTTPError as exc:
                last_error = TransportError(f"transport failure: {exc}", fingerprint=fp)
                continue
            latency_ms = int((time.perf_counter() - started) * 1000)
            if resp.status_code == 429:
                last_error = RateLimited("provider rate limit", fingerprint=fp)
                continue
            if resp.status_code >= 500:
                last_error = TransportError(f"provider HTTP {resp.status_code}", fingerprint=fp)
                continue
            if resp.status_code != 200:
                raise ProviderRefusal(f"provider HTTP {resp.status_code}: {resp.text[:200]}", fingerprint=fp)
            try:
                data = resp.json()
                choice = data["choices"][0]["message"]
                text = choice.get("content")
                usage = data.get("usage")
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderRefusal(f"malformed provider response: {exc}", fingerprint=fp) from exc
            if not text:
                raise ProviderRefusal("provider returned empty text", fingerprint=fp)
            return ChatResponse(text=text, latency_ms=latency_ms, token_counts=usage)
        assert last_error is not None
        raise last_error
