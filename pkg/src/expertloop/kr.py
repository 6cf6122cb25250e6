"""Knowledge repository: item lifecycle, status lattice, and temporal scoring.

Items carry two timestamps (added / last validated) and a validity status.
Retrieval ranks items by the product of a status weight, an exponential
recency decay over seconds since last validation, and a caller-supplied
relevance score, so stale, superseded, or off-topic knowledge drops out of
the working set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

from .errors import (
    ClockSkew,
    ContentInvalid,
    InvalidTransition,
    MalformedEvent,
    NonMonotoneSequence,
    UnknownKid,
)
from .events import EventRecord, canonical_json

SECONDS_PER_DAY = 86_400


class ContentKind(str, Enum):
    RULE = "rule"
    EXPLANATION = "explanation"
    FACT = "fact"
    EXEMPLAR = "exemplar"


class ItemStatus(str, Enum):
    VALID = "Valid"
    POTENTIALLY_OUTDATED = "PotentiallyOutdated"
    SUPERSEDED = "Superseded"


class Source(str, Enum):
    HUMAN = "human"
    LLM_ORACLE = "llm_oracle"
    SELF_DERIVED = "self_derived"


# Allowed lifecycle edges. PotentiallyOutdated -> Valid additionally requires
# an explicit override (a clarification answer re-validating the item).
_ALLOWED_EDGES = {
    (ItemStatus.VALID, ItemStatus.POTENTIALLY_OUTDATED),
    (ItemStatus.VALID, ItemStatus.SUPERSEDED),
    (ItemStatus.POTENTIALLY_OUTDATED, ItemStatus.SUPERSEDED),
    (ItemStatus.POTENTIALLY_OUTDATED, ItemStatus.VALID),
}


@dataclass(frozen=True)
class ExemplarPayload:
    instance_snapshot: str
    label: str
    reason: str

    def to_dict(self) -> dict:
        return {"instance_snapshot": self.instance_snapshot, "label": self.label, "reason": self.reason}

    @staticmethod
    def from_dict(raw: dict) -> "ExemplarPayload":
        return ExemplarPayload(
            instance_snapshot=raw["instance_snapshot"], label=raw["label"], reason=raw["reason"]
        )


@dataclass(frozen=True)
class KnowledgeContent:
    kind: ContentKind
    text: str
    exemplar_payload: Optional[ExemplarPayload] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ContentInvalid("knowledge text is empty")
        has_payload = self.exemplar_payload is not None
        if (self.kind == ContentKind.EXEMPLAR) != has_payload:
            raise ContentInvalid("exemplar_payload is required exactly for exemplar content")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value, "text": self.text}
        if self.exemplar_payload is not None:
            out["exemplar_payload"] = self.exemplar_payload.to_dict()
        return out

    @staticmethod
    def from_dict(raw: dict) -> "KnowledgeContent":
        payload = raw.get("exemplar_payload")
        return KnowledgeContent(
            kind=ContentKind(raw["kind"]),
            text=raw["text"],
            exemplar_payload=ExemplarPayload.from_dict(payload) if payload else None,
        )


@dataclass
class ItemMeta:
    source: Source
    usage_count: int = 0
    superseded_by: Optional[str] = None
    links: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "source": self.source.value,
            "usage_count": self.usage_count,
            "superseded_by": self.superseded_by,
            "links": list(self.links),
        }

    @staticmethod
    def from_dict(raw: dict) -> "ItemMeta":
        return ItemMeta(
            source=Source(raw["source"]),
            usage_count=int(raw["usage_count"]),
            superseded_by=raw.get("superseded_by"),
            links=list(raw.get("links", [])),
        )


@dataclass
class KnowledgeItem:
    kid: str
    content: KnowledgeContent
    ts_added: int
    ts_validated: int
    status: ItemStatus
    meta: ItemMeta

    def to_dict(self) -> dict:
        return {
            "kid": self.kid,
            "content": self.content.to_dict(),
            "ts_added": self.ts_added,
            "ts_validated": self.ts_validated,
            "status": self.status.value,
            "meta": self.meta.to_dict(),
        }

    @staticmethod
    def from_dict(raw: dict) -> "KnowledgeItem":
        return KnowledgeItem(
            kid=raw["kid"],
            content=KnowledgeContent.from_dict(raw["content"]),
            ts_added=int(raw["ts_added"]),
            ts_validated=int(raw["ts_validated"]),
            status=ItemStatus(raw["status"]),
            meta=ItemMeta.from_dict(raw["meta"]),
        )

    def copy(self) -> "KnowledgeItem":
        return KnowledgeItem.from_dict(self.to_dict())


@dataclass(frozen=True)
class ScoringParams:
    """Knobs for composite retrieval scoring.

    ``decay_per_s`` is the exponential decay rate per second; configuration
    surfaces express it per day and convert by dividing by 86400.
    """

    w_po: float = 0.5
    decay_per_s: float = 0.01 / SECONDS_PER_DAY
    tau_score: float = 0.0
    n_top: int = 5
    mode: str = "top_n"  # "top_n" | "threshold"

    def __post_init__(self):
        if not (0.0 <= self.w_po <= 1.0):
            raise ValueError("w_po must lie in [0, 1]")
        if self.decay_per_s < 0.0:
            raise ValueError("decay_per_s must be >= 0")
        if self.tau_score < 0.0:
            raise ValueError("tau_score must be >= 0")
        if self.n_top < 1:
            raise ValueError("n_top must be >= 1")
        if self.mode not in ("top_n", "threshold"):
            raise ValueError(f"unknown retrieval mode {self.mode!r}")

    @staticmethod
    def from_config(
        w_po: float = 0.5,
        decay_per_day: float = 0.01,
        tau_score: float = 0.0,
        n_top: int = 5,
        mode: str = "top_n",
    ) -> "ScoringParams":
        return ScoringParams(
            w_po=w_po,
            decay_per_s=decay_per_day / SECONDS_PER_DAY,
            tau_score=tau_score,
            n_top=n_top,
            mode=mode,
        )


# Status weights: fully trusted, discounted, dead.
_STATUS_WEIGHT = {
    ItemStatus.VALID: 1.0,
    ItemStatus.SUPERSEDED: 0.0,
}


@dataclass(frozen=True)
class ScoredItem:
    item: KnowledgeItem
    w_s: float
    s_t: float
    s_r: float
    composite: float


def status_weight(status: ItemStatus, params: ScoringParams) -> float:
    if status == ItemStatus.POTENTIALLY_OUTDATED:
        return params.w_po
    return _STATUS_WEIGHT[status]


def composite_score(item: KnowledgeItem, s_r: float, now: int, params: ScoringParams) -> ScoredItem:
    """Score one item as status_weight * exp(-decay * age) * relevance."""
    if now < item.ts_validated:
        raise ClockSkew(f"now={now} precedes ts_validated={item.ts_validated} for {item.kid}")
    if not (0.0 <= s_r <= 1.0):
        raise ValueError(f"relevance must lie in [0, 1], got {s_r}")
    w_s = status_weight(item.status, params)
    s_t = math.exp(-params.decay_per_s * (now - item.ts_validated))
    return ScoredItem(item=item, w_s=w_s, s_t=s_t, s_r=s_r, composite=w_s * s_t * s_r)


@dataclass(frozen=True)
class TransitionCause:
    relation: Optional[str] = None
    other_kid: Optional[str] = None
    override: bool = False
    note: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "relation": self.relation,
            "other_kid": self.other_kid,
            "override": self.override,
            "note": self.note,
        }


class KnowledgeRepository:
    """Single-writer store of knowledge items.

    Every mutation is emitted as a ``kr_mutation`` event before it is applied
    in memory, so a repository is always reconstructible from its event log
    (see :meth:`replay_from_log`). Reads hand out copies; callers never hold
    live references into the store.
    """

    def __init__(self, run_id: str = "run", emit: Callable[[str, dict], None] | None = None):
        self.run_id = run_id
        self._emit = emit
        self._items: dict[str, KnowledgeItem] = {}
        self._counter = 0

    def set_emitter(self, emit: Callable[[str, dict], None] | None) -> None:
        self._emit = emit

    # -- helpers --

    def _emit_event(self, payload: dict) -> None:
        if self._emit is not None:
            self._emit("kr_mutation", payload)

    def _next_kid(self) -> str:
        while True:
            self._counter += 1
            kid = f"k-{self.run_id}-{self._counter:05d}"
            if kid not in self._items:
                return kid

    def _get_live(self, kid: str) -> KnowledgeItem:
        try:
            return self._items[kid]
        except KeyError:
            raise UnknownKid(kid) from None

    # -- reads --

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, kid: str) -> bool:
        return kid in self._items

    def get(self, kid: str) -> KnowledgeItem:
        return self._get_live(kid).copy()

    def items(self) -> list[KnowledgeItem]:
        return [item.copy() for item in self._items.values()]

    def kids(self) -> list[str]:
        return list(self._items.keys())

    # -- mutations --

    def add_item(
        self,
        content: KnowledgeContent,
        source: Source,
        now: int,
        kid: Optional[str] = None,
    ) -> str:
        """Add a fresh Valid item; both timestamps start at ``now``.

        ``kid`` is normally generated (run id + monotone counter, so
        duplicates cannot occur); seed loading may supply an explicit id.
        """
        if kid is None:
            kid = self._next_kid()
        elif kid in self._items:
            raise ContentInvalid(f"explicit kid {kid!r} already exists")
        item = KnowledgeItem(
            kid=kid,
            content=content,
            ts_added=now,
            ts_validated=now,
            status=ItemStatus.VALID,
            meta=ItemMeta(source=source),
        )
        self._emit_event({"op": "add", "kid": kid, "item": item.to_dict()})
        self._items[kid] = item
        return kid

    def transition_status(
        self,
        kid: str,
        new_status: ItemStatus,
        now: int,
        cause: TransitionCause,
    ) -> KnowledgeItem:
        item = self._get_live(kid)
        edge = (item.status, new_status)
        if edge not in _ALLOWED_EDGES:
            raise InvalidTransition(f"{item.status.value} -> {new_status.value} is not allowed for {kid}")
        if edge == (ItemStatus.POTENTIALLY_OUTDATED, ItemStatus.VALID) and not cause.override:
            raise InvalidTransition(
                f"PotentiallyOutdated -> Valid for {kid} requires an explicit clarification override"
            )
        if now < item.ts_validated:
            raise ClockSkew(f"now={now} precedes ts_validated={item.ts_validated} for {kid}")
        superseded_by = item.meta.superseded_by
        if new_status == ItemStatus.SUPERSEDED:
            if cause.other_kid is None:
                raise InvalidTransition(f"supersession of {kid} requires the superseding kid")
            if cause.other_kid not in self._items:
                raise UnknownKid(cause.other_kid)
            if cause.other_kid == kid or self._reaches(cause.other_kid, kid):
                raise InvalidTransition(f"supersession {kid} -> {cause.other_kid} would create a cycle")
            superseded_by = cause.other_kid

        self._emit_event(
            {
                "op": "transition",
                "kid": kid,
                "from": item.status.value,
                "to": new_status.value,
                "ts_validated": now,
                "cause": cause.to_dict(),
            }
        )
        item.status = new_status
        item.ts_validated = now
        item.meta.superseded_by = superseded_by
        return item.copy()

    def _reaches(self, start: str, target: str) -> bool:
        """Walk superseded_by links from ``start``; True if ``target`` shows up."""
        seen = set()
        cursor: Optional[str] = start
        while cursor is not None and cursor not in seen:
            if cursor == target:
                return True
            seen.add(cursor)
            nxt = self._items.get(cursor)
            cursor = nxt.meta.superseded_by if nxt is not None else None
        return cursor == target

    def link_items(self, kid: str, other_kid: str, now: int, note: Optional[str] = None) -> None:
        """Record a relation link in ``kid``'s metadata (no status change)."""
        item = self._get_live(kid)
        if other_kid not in self._items:
            raise UnknownKid(other_kid)
        if other_kid in item.meta.links:
            return
        self._emit_event({"op": "link", "kid": kid, "other_kid": other_kid, "ts": now, "note": note})
        item.meta.links.append(other_kid)

    # -- retrieval --

    def score_all(
        self, relevance: Callable[[str], float], now: int, params: ScoringParams
    ) -> list[ScoredItem]:
        return [composite_score(item, relevance(item.kid), now, params) for item in self._items.values()]

    def retrieve_subset(
        self, relevance: Callable[[str], float], now: int, params: ScoringParams
    ) -> list[ScoredItem]:
        """Rank all items and return the working subset.

        Ordering: composite descending, then ts_validated descending, then
        kid ascending. ``top_n`` mode truncates to the n_top best; threshold
        mode keeps everything scoring at least tau_score. Returned items get
        their usage count bumped (an observable mutation, hence an event).
        """
        scored = self.score_all(relevance, now, params)
        scored.sort(key=lambda s: (-s.composite, -s.item.ts_validated, s.item.kid))
        if params.mode == "top_n":
            chosen = scored[: params.n_top]
        else:
            chosen = [s for s in scored if s.composite >= params.tau_score]
        if chosen:
            kids = [s.item.kid for s in chosen]
            self._emit_event({"op": "usage", "kids": kids, "ts": now})
            for s in chosen:
                self._items[s.item.kid].meta.usage_count += 1
        return [replace(s, item=s.item.copy()) for s in chosen]

    # -- serialization / replay --

    def serialize_state(self) -> bytes:
        """Canonical byte encoding of the full repository state."""
        items = [self._items[kid].to_dict() for kid in sorted(self._items)]
        return canonical_json({"counter": self._counter, "items": items, "run_id": self.run_id}).encode("utf-8")

    def apply_event(self, payload: dict) -> None:
        """Apply one kr_mutation payload; used by replay."""
        try:
            op = payload["op"]
            if op == "add":
                item = KnowledgeItem.from_dict(payload["item"])
                if item.kid in self._items:
                    raise MalformedEvent(f"duplicate add for kid {item.kid}")
                self._items[item.kid] = item
                prefix = f"k-{self.run_id}-"
                if item.kid.startswith(prefix):
                    try:
                        self._counter = max(self._counter, int(item.kid[len(prefix):]))
                    except ValueError:
                        pass
            elif op == "transition":
                item = self._get_live(payload["kid"])
                item.status = ItemStatus(payload["to"])
                item.ts_validated = int(payload["ts_validated"])
                other = payload.get("cause", {}).get("other_kid")
                if item.status == ItemStatus.SUPERSEDED:
                    item.meta.superseded_by = other
            elif op == "link":
                item = self._get_live(payload["kid"])
                if payload["other_kid"] not in item.meta.links:
                    item.meta.links.append(payload["other_kid"])
            elif op == "usage":
                for kid in payload["kids"]:
                    self._get_live(kid).meta.usage_count += 1
            elif op == "integration_report":
                pass  # summary record; the add/transition/link events carry the state
            else:
                raise MalformedEvent(f"unknown kr_mutation op {op!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedEvent(f"bad kr_mutation payload: {payload!r}") from exc

    @staticmethod
    def replay_from_log(events: Sequence[EventRecord], run_id: str = "run") -> "KnowledgeRepository":
        """Rebuild a repository from an ordered prefix of a run log.

        Only kr_mutation events are folded; other kinds pass through. The
        sequence must be dense (a gap means the log prefix is not
        well formed).
        """
        repo = KnowledgeRepository(run_id=run_id)
        last_seq: Optional[int] = None
        for record in events:
            if last_seq is not None and record.seq != last_seq + 1:
                raise NonMonotoneSequence(f"seq gap: {last_seq} -> {record.seq}")
            last_seq = record.seq
            if record.kind == "kr_mutation":
                repo.apply_event(record.payload)
        return repo


def load_seed_items(
    repo: KnowledgeRepository, entries: Iterable[dict], now: int, default_source: Source = Source.HUMAN
) -> list[str]:
    """Load an initial repository from decoded seed records.

    Each record carries kind/text (and optionally kid, source, exemplar
    fields); items enter as Valid at ``now``.
    """
    kids = []
    for raw in entries:
        payload = None
        if raw.get("kind") == ContentKind.EXEMPLAR.value:
            payload = ExemplarPayload(
                instance_snapshot=raw.get("instance_snapshot", ""),
                label=raw.get("label", ""),
                reason=raw.get("reason", raw.get("text", "")),
            )
        content = KnowledgeContent(
            kind=ContentKind(raw.get("kind", "rule")), text=raw["text"], exemplar_payload=payload
        )
        source = Source(raw.get("source", default_source.value))
        kids.append(repo.add_item(content, source, now, kid=raw.get("kid")))
    return kids
