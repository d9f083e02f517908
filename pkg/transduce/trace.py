"""
trace.py
--------
Append-only record of every invocation: types, input/output, explanation,
provenance, retries, timing and status.

The active sink and the current parent record are carried in contextvars
so that tasks spawned by map/reduce inherit them. Record ids are reserved
before a call starts, which keeps parent ids below child ids and makes id
assignment independent of completion order.
"""
from __future__ import annotations

import contextlib
import contextvars
import datetime
import json
import logging
import os
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, Optional, Sequence, Union

from transduce.common import canonical_dumps, digest
from transduce.errors import SinkUnavailable, UnknownRecord
from transduce.schema_core import State, to_plain

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_CANCELLED = "cancelled"

TIMESTAMP_FIELDS = ("started_at", "ended_at")


class INHERIT:
    """Sentinel: take the parent id from the current context."""


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclass
class TraceRecord:
    record_id: int
    parent_id: Optional[int]
    kind: str
    source: str
    target: str
    model: Optional[str] = None
    instructions_digest: Optional[str] = None
    input_digest: Optional[str] = None
    input: Any = None
    output: Any = None
    error: Optional[str] = None
    explanation: Optional[dict[str, Any]] = None
    provenance: Optional[dict[str, list[str]]] = None
    element_evidence: Optional[dict[str, list[int]]] = None
    retries: int = 0
    status: str = STATUS_OK
    upstream: list[int] = field(default_factory=list)
    detail: dict[str, Any] = field(default_factory=dict)
    started_at: Optional[str] = None
    ended_at: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "parent_id": self.parent_id,
            "upstream": list(self.upstream),
            "status": self.status,
            "function": {
                "kind": self.kind,
                "source": self.source,
                "target": self.target,
                "model": self.model,
                "instructions_digest": self.instructions_digest,
            },
            "input_digest": self.input_digest,
            "input": self.input,
            "output": self.output,
            "error": self.error,
            "explanation": self.explanation,
            "provenance": self.provenance,
            "element_evidence": self.element_evidence,
            "retries": self.retries,
            "detail": self.detail,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
        }

    def value_fields(self) -> dict[str, Any]:
        """to_dict() without timestamps: the part that must be reproducible."""
        return {k: v for k, v in self.to_dict().items() if k not in TIMESTAMP_FIELDS}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TraceRecord":
        fn = doc.get("function") or {}
        return cls(
            record_id=doc["record_id"],
            parent_id=doc.get("parent_id"),
            kind=fn.get("kind", ""),
            source=fn.get("source", ""),
            target=fn.get("target", ""),
            model=fn.get("model"),
            instructions_digest=fn.get("instructions_digest"),
            input_digest=doc.get("input_digest"),
            input=doc.get("input"),
            output=doc.get("output"),
            error=doc.get("error"),
            explanation=doc.get("explanation"),
            provenance=doc.get("provenance"),
            element_evidence=doc.get("element_evidence"),
            retries=doc.get("retries", 0),
            status=doc.get("status", STATUS_OK),
            upstream=list(doc.get("upstream") or []),
            detail=dict(doc.get("detail") or {}),
            started_at=doc.get("started_at"),
            ended_at=doc.get("ended_at"),
        )


# ============================================================
#  Sinks
# ============================================================

class TraceSink:
    """Thread-safe id allocator + record store. Subclasses add persistence."""

    def __init__(self, on_error: Literal["fail", "warn"] = "fail"):
        if on_error not in ("fail", "warn"):
            raise ValueError(f"on_error must be 'fail' or 'warn', not {on_error!r}")
        self.on_error = on_error
        self._lock = threading.Lock()
        self._next_id = 1
        self._records: dict[int, TraceRecord] = {}

    def reserve_id(self) -> int:
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            return rid

    def record(self, rec: TraceRecord) -> int:
        with self._lock:
            self._records[rec.record_id] = rec
            try:
                self._persist(rec)
            except OSError as e:
                if self.on_error == "fail":
                    raise SinkUnavailable(f"could not write trace record {rec.record_id}: {e}") from e
                logger.warning("[!] Dropped trace record %d: %s", rec.record_id, e)
        return rec.record_id

    def _persist(self, rec: TraceRecord) -> None:
        pass

    def records(self) -> list[TraceRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def has(self, record_id: int) -> bool:
        with self._lock:
            return record_id in self._records

    def get(self, record_id: int) -> TraceRecord:
        with self._lock:
            try:
                return self._records[record_id]
            except KeyError:
                raise UnknownRecord(record_id) from None

    def __len__(self) -> int:
        return len(self._records)


class MemorySink(TraceSink):
    pass


class DiscardSink(TraceSink):
    """Hands out ids but keeps nothing. Used when no sink is bound."""

    def record(self, rec: TraceRecord) -> int:
        return rec.record_id


class JsonlSink(TraceSink):
    """Appends one canonical JSON line per record as it completes."""

    def __init__(self, path: str, on_error: Literal["fail", "warn"] = "fail"):
        super().__init__(on_error)
        self.path = path

    def _persist(self, rec: TraceRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(canonical_dumps(rec.to_dict()) + "\n")
            f.flush()

    def compact(self) -> str:
        """Rewrite the file in record-id order."""
        tmp_path = self.path + ".tmp"
        with open(tmp_path, "wb") as f:
            f.write(export_jsonl(self.records()))
        os.replace(tmp_path, self.path)
        return self.path


_default_sink = DiscardSink()
_sink_var: contextvars.ContextVar[Optional[TraceSink]] = contextvars.ContextVar("transduce_sink", default=None)
_parent_var: contextvars.ContextVar[Optional[int]] = contextvars.ContextVar("transduce_parent", default=None)


def current_sink() -> TraceSink:
    sink = _sink_var.get()
    return _default_sink if sink is None else sink


def current_parent() -> Optional[int]:
    return _parent_var.get()


@contextlib.contextmanager
def tracing(sink: TraceSink):
    """Bind ``sink`` for everything invoked inside the block (and its tasks)."""
    token = _sink_var.set(sink)
    parent_token = _parent_var.set(None)
    try:
        yield sink
    finally:
        _parent_var.reset(parent_token)
        _sink_var.reset(token)


@contextlib.contextmanager
def parent_scope(record_id: int):
    token = _parent_var.set(record_id)
    try:
        yield record_id
    finally:
        _parent_var.reset(token)


# ============================================================
#  Spans
# ============================================================

def _plain_payload(payload: Any) -> Any:
    if isinstance(payload, State) or isinstance(payload, (list, tuple)):
        return to_plain(payload)
    return payload


class Span:
    """One in-progress record; exactly one of succeeded/failed/cancelled closes it."""

    def __init__(self, sink: TraceSink, rec: TraceRecord):
        self.sink = sink
        self.rec = rec

    @property
    def record_id(self) -> int:
        return self.rec.record_id

    def _close(self, status: str) -> int:
        self.rec.status = status
        self.rec.ended_at = _now()
        return self.sink.record(self.rec)

    def succeeded(self, result: Any, detail: Mapping[str, Any] | None = None) -> int:
        """``result`` is a Transduction or anything with its four fields."""
        self.rec.output = to_plain(result.state)
        self.rec.explanation = result.explanation.as_dict()
        self.rec.provenance = result.provenance.as_dict()
        if result.element_evidence is not None:
            self.rec.element_evidence = {k: list(v) for k, v in result.element_evidence.items()}
        self.rec.retries = result.retries
        if detail:
            self.rec.detail.update(detail)
        return self._close(STATUS_OK)

    def closed_with(self, output: Any, detail: Mapping[str, Any] | None = None, status: str = STATUS_OK,
                    error: str | None = None) -> int:
        """Close an envelope record whose output is not a single state."""
        self.rec.output = _plain_payload(output)
        self.rec.error = error
        if detail:
            self.rec.detail.update(detail)
        return self._close(status)

    def failed(self, exc: BaseException) -> int:
        self.rec.error = f"{type(exc).__name__}: {exc}"
        attempts = getattr(exc, "attempts", None)
        if attempts:
            self.rec.retries = attempts - 1
        return self._close(STATUS_ERROR)

    def cancelled(self) -> int:
        self.rec.error = "cancelled"
        return self._close(STATUS_CANCELLED)


def open_span(sink: TraceSink, *, kind: str, source: str, target: str, payload: Any,
              record_id: int | None = None, parent_id: int | None = None, model: str | None = None,
              instructions: str | None = None, upstream: Sequence[int] = ()) -> Span:
    plain = _plain_payload(payload)
    rec = TraceRecord(
        record_id=record_id if record_id is not None else sink.reserve_id(),
        parent_id=parent_id,
        kind=kind,
        source=source,
        target=target,
        model=model,
        instructions_digest=digest(instructions) if instructions else None,
        input_digest=digest(canonical_dumps(plain)),
        input=plain,
        upstream=list(upstream),
        started_at=_now(),
    )
    return Span(sink, rec)


# ============================================================
#  Export / import / queries
# ============================================================

RecordsLike = Union[TraceSink, Iterable[TraceRecord]]


def _as_records(records: RecordsLike) -> list[TraceRecord]:
    if isinstance(records, TraceSink):
        return records.records()
    return sorted(records, key=lambda r: r.record_id)


def export_jsonl(records: RecordsLike) -> bytes:
    return b"".join((canonical_dumps(r.to_dict()) + "\n").encode("utf-8") for r in _as_records(records))


def load_jsonl(source: Union[str, bytes, os.PathLike]) -> list[TraceRecord]:
    if isinstance(source, bytes):
        lines = source.decode("utf-8").splitlines()
    else:
        with open(source, encoding="utf-8") as f:
            lines = f.read().splitlines()
    return [TraceRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


@dataclass
class Lineage:
    record: TraceRecord
    ancestors: list[TraceRecord]
    evidence: dict[str, list[str]]

    @property
    def chain(self) -> list[int]:
        return [r.record_id for r in self.ancestors]


def lineage(records: RecordsLike, record_id: int) -> Lineage:
    """Ancestor chain (record first, root last) and per-slot evidence closure.

    The closure follows ``upstream`` links, the records whose outputs were
    this record's inputs, composing provenance maps relationally.
    """
    by_id = {r.record_id: r for r in _as_records(records)}
    if record_id not in by_id:
        raise UnknownRecord(record_id)

    memo: dict[int, dict[str, set[str]]] = {}

    def closure(rid: int) -> dict[str, set[str]]:
        if rid in memo:
            return memo[rid]
        rec = by_id[rid]
        prov = rec.provenance or {}
        ups = [closure(u) for u in rec.upstream if u in by_id]
        if not ups:
            result = {z: set(ys) for z, ys in prov.items()}
        else:
            result = {z: set().union(*(u.get(y, set()) for u in ups for y in ys)) for z, ys in prov.items()}
        memo[rid] = result
        return result

    ancestors = []
    seen: set[int] = set()
    current: Optional[int] = record_id
    while current is not None and current in by_id and current not in seen:
        seen.add(current)
        ancestors.append(by_id[current])
        current = by_id[current].parent_id

    return Lineage(
        record=by_id[record_id],
        ancestors=ancestors,
        evidence={z: sorted(ys) for z, ys in closure(record_id).items()},
    )


def children_of(records: RecordsLike, record_id: int) -> list[TraceRecord]:
    return [r for r in _as_records(records) if r.parent_id == record_id]


def show(records: RecordsLike, status: str | None = None) -> str:
    lines = []
    for r in _as_records(records):
        if status and r.status != status:
            continue
        parent = "-" if r.parent_id is None else str(r.parent_id)
        line = f"#{r.record_id:<4} parent={parent:<4} {r.status:<9} {r.kind:<13} {r.target} << {r.source}"
        if r.retries:
            line += f" retries={r.retries}"
        if r.error:
            line += f" error={r.error}"
        lines.append(line)
    return "\n".join(lines)
