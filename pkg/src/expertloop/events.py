"""Append-only event log: the source of truth for every run.

One event per line, UTF-8, canonical JSON with fields (seq, ts, kind,
payload). Sequence numbers are dense (seq = last + 1) within a log, and a
write is flushed to disk before the caller proceeds, so any externally
observable state can be rebuilt from the log alone.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .errors import MalformedEvent, NonMonotoneSequence, SequenceViolation, StorageFailure

# Exhaustive over all state changes a run can make.
EVENT_KINDS = (
    "instance_seen",
    "prediction",
    "dialogue",
    "query_issued",
    "feedback_received",
    "kr_mutation",
    "clarification",
    "metrics_snapshot",
    "run_control",
)


def canonical_json(obj) -> str:
    """Deterministic JSON used everywhere a byte-stable encoding matters."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class EventRecord:
    seq: int
    ts: int
    kind: str
    payload: dict

    def to_line(self) -> str:
        return canonical_json({"seq": self.seq, "ts": self.ts, "kind": self.kind, "payload": self.payload})

    @staticmethod
    def from_line(line: str) -> "EventRecord":
        try:
            raw = json.loads(line)
            seq = raw["seq"]
            ts = raw["ts"]
            kind = raw["kind"]
            payload = raw["payload"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedEvent(f"bad event line: {line[:120]!r}") from exc
        if not isinstance(seq, int) or not isinstance(ts, int) or not isinstance(payload, dict):
            raise MalformedEvent(f"bad field types in event line: {line[:120]!r}")
        if kind not in EVENT_KINDS:
            raise MalformedEvent(f"unknown event kind {kind!r}")
        return EventRecord(seq=seq, ts=ts, kind=kind, payload=payload)


class EventLog:
    """In-memory event sequence with optional write-ahead file persistence.

    Mutators append through a single owner (the run's command stream); the
    file write happens before the in-memory append so a crash between the
    two leaves the log ahead of (never behind) live state.
    """

    def __init__(self, path: str | Path | None = None, fsync: bool = False):
        self._records: list[EventRecord] = []
        self._path = Path(path) if path is not None else None
        self._fsync = fsync
        self._fh: io.TextIOWrapper | None = None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "a", encoding="utf-8")

    # -- write side --

    def append(self, kind: str, payload: dict, ts: int) -> EventRecord:
        record = EventRecord(seq=self.next_seq(), ts=ts, kind=kind, payload=payload)
        return self.append_record(record)

    def append_record(self, record: EventRecord) -> EventRecord:
        if record.seq != self.next_seq():
            raise SequenceViolation(f"expected seq {self.next_seq()}, got {record.seq}")
        if record.kind not in EVENT_KINDS:
            raise MalformedEvent(f"unknown event kind {record.kind!r}")
        self._write_durably(record)
        self._records.append(record)
        return record

    def _write_durably(self, record: EventRecord) -> None:
        if self._fh is None:
            return
        try:
            self._fh.write(record.to_line() + "\n")
            self._fh.flush()
            if self._fsync:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- read side --

    def next_seq(self) -> int:
        return self._records[-1].seq + 1 if self._records else 1

    def read_from(self, from_seq: int = 1) -> list[EventRecord]:
        return [r for r in self._records if r.seq >= from_seq]

    @property
    def records(self) -> tuple[EventRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[EventRecord]:
        return iter(self._records)


def check_monotone(records: Iterable[EventRecord]) -> list[EventRecord]:
    """Validate that a record sequence is dense starting at its first seq."""
    out: list[EventRecord] = []
    for record in records:
        if out and record.seq != out[-1].seq + 1:
            raise NonMonotoneSequence(f"seq gap: {out[-1].seq} -> {record.seq}")
        out.append(record)
    return out


def load_events(path: str | Path) -> list[EventRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(EventRecord.from_line(line))
    return check_monotone(records)


EmitFn = Callable[[str, dict], None]
