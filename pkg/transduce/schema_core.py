"""
schema_core.py
--------------
Record types, states, validation and JSON Schema emission.

A type is either a basic kind (text, integer, real, boolean), a list of a
type, or a named record of described slots. A State is a validated
instance of a record type; it cannot be built any other way than through
``validate``.
"""
from __future__ import annotations

import json
import math
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Any, Iterable, Union

from transduce.common import canonical_dumps
from transduce.errors import (
    CyclicType,
    DuplicateRecord,
    DuplicateSlot,
    MissingSlot,
    ParseError,
    SchemaError,
    TypeMismatch,
    UnknownRecordType,
    UnknownSlot,
)


# ============================================================
#  Type expressions
# ============================================================

class BasicKind(str, Enum):
    TEXT = "text"
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"


@dataclass(frozen=True)
class Basic:
    kind: BasicKind

    def describe(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class ListOf:
    element: "TypeExpr"

    def describe(self) -> str:
        return f"list of {self.element.describe()}"


@dataclass(frozen=True)
class RecordRef:
    record: "RecordType"

    def describe(self) -> str:
        return f"record {self.record.name}"


TypeExpr = Union[Basic, ListOf, RecordRef]

TEXT = Basic(BasicKind.TEXT)
INTEGER = Basic(BasicKind.INTEGER)
REAL = Basic(BasicKind.REAL)
BOOLEAN = Basic(BasicKind.BOOLEAN)


def list_of(element: TypeExpr) -> ListOf:
    return ListOf(element)


def record(record_type: "RecordType") -> RecordRef:
    return RecordRef(record_type)


# ============================================================
#  Slots and records
# ============================================================

@dataclass(frozen=True)
class SlotSpec:
    name: str
    slot_type: TypeExpr
    description: str = ""
    optional: bool = False
    enum: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name.isidentifier():
            raise SchemaError(f"slot name {self.name!r} is not an identifier")
        if not isinstance(self.slot_type, (Basic, ListOf, RecordRef)):
            raise SchemaError(f"slot {self.name!r} has no valid type")
        if self.enum is not None:
            if self.slot_type != TEXT:
                raise SchemaError(f"slot {self.name!r}: enumerated values need a text slot")
            object.__setattr__(self, "enum", tuple(self.enum))


def slot(name: str, slot_type: TypeExpr, description: str = "", optional: bool = False,
         enum: Iterable[str] | None = None) -> SlotSpec:
    return SlotSpec(name, slot_type, description, optional, tuple(enum) if enum is not None else None)


@dataclass(frozen=True)
class RecordType:
    name: str
    slots: tuple[SlotSpec, ...] = ()
    description: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise SchemaError("record name must be a non-empty string")
        object.__setattr__(self, "slots", tuple(self.slots))
        seen: set[str] = set()
        for s in self.slots:
            if s.name in seen:
                raise DuplicateSlot(self.name, s.name)
            seen.add(s.name)
        _check_acyclic(self, (self.name,))

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    def slot(self, name: str) -> SlotSpec:
        for s in self.slots:
            if s.name == name:
                return s
        raise UnknownSlot(name)

    def __contains__(self, name: object) -> bool:
        return any(s.name == name for s in self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    # operator sugar, see type_algebra
    def __and__(self, other: "RecordType") -> "RecordType":
        from transduce.type_algebra import merge_types
        return merge_types(self, other)

    def __matmul__(self, other: "RecordType") -> "RecordType":
        # `A @ B` keeps B under `left`
        from transduce.type_algebra import compose_types
        return compose_types(other, self)

    def project(self, names: Iterable[str]) -> "RecordType":
        from transduce.type_algebra import project_type
        return project_type(self, names)

    def __repr__(self) -> str:
        inner = ", ".join(f"{s.name}: {s.slot_type.describe()}" for s in self.slots)
        return f"RecordType({self.name} [{inner}])"


def _nested_records(texpr: TypeExpr) -> list["RecordType"]:
    if isinstance(texpr, RecordRef):
        return [texpr.record]
    if isinstance(texpr, ListOf):
        return _nested_records(texpr.element)
    return []


def _check_acyclic(rt: RecordType, path: tuple[str, ...]) -> None:
    for s in rt.slots:
        for nested in _nested_records(s.slot_type):
            if nested.name in path:
                raise CyclicType(path + (nested.name,))
            _check_acyclic(nested, path + (nested.name,))


class TypeRegistry:
    """Name -> RecordType table. Re-registering an identical definition is a no-op."""

    def __init__(self) -> None:
        self._records: dict[str, RecordType] = {}
        self._lock = threading.Lock()

    def register(self, rt: RecordType) -> RecordType:
        with self._lock:
            existing = self._records.get(rt.name)
            if existing is not None:
                if existing != rt:
                    raise DuplicateRecord(rt.name)
                return existing
            self._records[rt.name] = rt
            return rt

    def lookup(self, name: str) -> RecordType:
        try:
            return self._records[name]
        except KeyError:
            raise UnknownRecordType(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self._records

    def names(self) -> list[str]:
        return list(self._records)


default_registry = TypeRegistry()


def define_record(name: str, slots: Iterable[SlotSpec], description: str = "",
                  registry: TypeRegistry | None = None) -> RecordType:
    rt = RecordType(name, tuple(slots), description)
    return (registry or default_registry).register(rt)


def lookup_record(name: str, registry: TypeRegistry | None = None) -> RecordType:
    return (registry or default_registry).lookup(name)


# ============================================================
#  States
# ============================================================

class State:
    """Immutable, validated instance of a RecordType."""

    __slots__ = ("_record_type", "_values")

    def __init__(self, record_type: RecordType, values: Mapping[str, Any] | None = None, **kwargs: Any):
        checked = validate({**(values or {}), **kwargs}, record_type)
        object.__setattr__(self, "_record_type", checked._record_type)
        object.__setattr__(self, "_values", checked._values)

    @classmethod
    def _trusted(cls, record_type: RecordType, values: dict[str, Any]) -> "State":
        obj = object.__new__(cls)
        object.__setattr__(obj, "_record_type", record_type)
        object.__setattr__(obj, "_values", MappingProxyType(values))
        return obj

    @property
    def record_type(self) -> RecordType:
        return self._record_type

    @property
    def values(self) -> Mapping[str, Any]:
        return self._values

    def __getattr__(self, name: str) -> Any:
        try:
            return object.__getattribute__(self, "_values")[name]
        except KeyError:
            raise AttributeError(name) from None

    def __getitem__(self, name: str) -> Any:
        return self._values[name]

    def get(self, name: str, default: Any = None) -> Any:
        return self._values.get(name, default)

    def keys(self) -> tuple[str, ...]:
        return self._record_type.slot_names

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("State is immutable")

    def as_dict(self) -> dict[str, Any]:
        return to_plain(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, State):
            return NotImplemented
        return self._record_type == other._record_type and dict(self._values) == dict(other._values)

    def __hash__(self) -> int:
        return hash((self._record_type.name, to_json(self)))

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v!r}" for k, v in self._values.items())
        return f"{self._record_type.name}({inner})"

    def __and__(self, other: "State") -> "State":
        from transduce.type_algebra import merge_states
        return merge_states(self, other)

    def __matmul__(self, other: "State") -> "State":
        from transduce.type_algebra import compose_states
        return compose_states(other, self)


def type_of(state: State) -> RecordType:
    return state.record_type


def to_plain(value: Any) -> Any:
    if isinstance(value, State):
        return {k: to_plain(v) for k, v in value.values.items()}
    if isinstance(value, Mapping):
        return {k: to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    return value


# ============================================================
#  Validation
# ============================================================

def _kind_name(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "real"
    if isinstance(value, str):
        return "text"
    if isinstance(value, (list, tuple)):
        return "list"
    if isinstance(value, (Mapping, State)):
        return "record"
    return type(value).__name__


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _check_value(value: Any, texpr: TypeExpr, path: str) -> Any:
    if isinstance(texpr, Basic):
        kind = texpr.kind
        if kind is BasicKind.TEXT and isinstance(value, str):
            return value
        if kind is BasicKind.BOOLEAN and isinstance(value, bool):
            return value
        if kind is BasicKind.INTEGER and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is BasicKind.INTEGER and isinstance(value, float) and value.is_integer():
            return int(value)
        if kind is BasicKind.REAL and isinstance(value, (int, float)) and not isinstance(value, bool):
            try:
                real = float(value)
            except OverflowError:
                raise TypeMismatch(path, "real", "integer out of range") from None
            if not math.isfinite(real):
                raise TypeMismatch(path, "real", "non-finite real")
            return real
        raise TypeMismatch(path, texpr.describe(), _kind_name(value))

    if isinstance(texpr, ListOf):
        if not isinstance(value, (list, tuple)):
            raise TypeMismatch(path, texpr.describe(), _kind_name(value))
        return tuple(_check_value(v, texpr.element, f"{path}[{i}]") for i, v in enumerate(value))

    # RecordRef
    if isinstance(value, State) and value.record_type == texpr.record:
        return value
    if isinstance(value, State):
        value = value.as_dict()
    if not isinstance(value, Mapping):
        raise TypeMismatch(path, texpr.describe(), _kind_name(value))
    return State._trusted(texpr.record, _check_record(value, texpr.record, path))


def _check_record(candidate: Mapping[str, Any], rt: RecordType, path: str) -> dict[str, Any]:
    for key in candidate:
        if key not in rt:
            raise UnknownSlot(_join(path, str(key)))
    values: dict[str, Any] = {}
    for s in rt.slots:
        where = _join(path, s.name)
        raw = candidate.get(s.name)
        if raw is None:
            if not s.optional:
                raise MissingSlot(where)
            values[s.name] = None
            continue
        checked = _check_value(raw, s.slot_type, where)
        if s.enum is not None and checked not in s.enum:
            raise TypeMismatch(where, "one of " + ", ".join(s.enum), f"text {checked!r} not in enum")
        values[s.name] = checked
    return values


def validate(candidate: Mapping[str, Any] | State, record_type: RecordType) -> State:
    """Return a State of ``record_type`` or raise exactly one ValidationFailure."""
    if isinstance(candidate, State):
        if candidate.record_type == record_type:
            return candidate
        candidate = candidate.as_dict()
    if not isinstance(candidate, Mapping):
        raise TypeMismatch("$", f"record {record_type.name}", _kind_name(candidate))
    return State._trusted(record_type, _check_record(candidate, record_type, ""))


# ============================================================
#  JSON
# ============================================================

def to_json(state: State) -> str:
    return canonical_dumps(to_plain(state))


def _reject_constant(name: str) -> Any:
    raise ParseError(f"non-standard constant {name}")


def parse_json(text: str | bytes) -> Any:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(str(e)) from e
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ParseError(str(e)) from e


def from_json(text: str | bytes, record_type: RecordType) -> State:
    return validate(parse_json(text), record_type)


_JSON_KINDS = {
    BasicKind.TEXT: "string",
    BasicKind.INTEGER: "integer",
    BasicKind.REAL: "number",
    BasicKind.BOOLEAN: "boolean",
}


def _schema_of_expr(texpr: TypeExpr) -> dict[str, Any]:
    if isinstance(texpr, Basic):
        return {"type": _JSON_KINDS[texpr.kind]}
    if isinstance(texpr, ListOf):
        return {"type": "array", "items": _schema_of_expr(texpr.element)}
    return json_schema_of(texpr.record)


def _schema_of_slot(s: SlotSpec) -> dict[str, Any]:
    schema = _schema_of_expr(s.slot_type)
    if s.enum is not None:
        schema["enum"] = list(s.enum) + ([None] if s.optional else [])
    if s.optional:
        if "anyOf" in schema or schema.get("type") == "object":
            schema = {"anyOf": [schema, {"type": "null"}]}
        else:
            schema["type"] = [schema["type"], "null"]
    if s.description:
        schema["description"] = s.description
    return schema


def json_schema_of(record_type: RecordType) -> dict[str, Any]:
    """JSON Schema (draft 2020-12 compatible) accepting exactly what from_json accepts."""
    schema: dict[str, Any] = {
        "type": "object",
        "title": record_type.name,
        "properties": {s.name: _schema_of_slot(s) for s in record_type.slots},
        "required": [s.name for s in record_type.slots if not s.optional],
        "additionalProperties": False,
    }
    if record_type.description:
        schema["description"] = record_type.description
    return schema


# ============================================================
#  Declarative type documents (workflow files)
# ============================================================

def type_expr_to_doc(texpr: TypeExpr) -> Any:
    if isinstance(texpr, Basic):
        return texpr.kind.value
    if isinstance(texpr, ListOf):
        return {"list": type_expr_to_doc(texpr.element)}
    return {"record": texpr.record.name}


def record_to_dict(rt: RecordType) -> dict[str, Any]:
    doc: dict[str, Any] = {"name": rt.name, "slots": []}
    if rt.description:
        doc["description"] = rt.description
    for s in rt.slots:
        entry: dict[str, Any] = {"name": s.name, "type": type_expr_to_doc(s.slot_type)}
        if s.description:
            entry["description"] = s.description
        if s.optional:
            entry["optional"] = True
        if s.enum is not None:
            entry["enum"] = list(s.enum)
        doc["slots"].append(entry)
    return doc


def _referenced_names(doc: Any) -> list[str]:
    if isinstance(doc, Mapping):
        if "record" in doc:
            return [doc["record"]]
        if "list" in doc:
            return _referenced_names(doc["list"])
    return []


def _parse_type_doc(doc: Any, resolve) -> TypeExpr:
    if isinstance(doc, str):
        try:
            return Basic(BasicKind(doc))
        except ValueError:
            raise SchemaError(f"unknown basic kind {doc!r}") from None
    if isinstance(doc, Mapping) and "list" in doc:
        return ListOf(_parse_type_doc(doc["list"], resolve))
    if isinstance(doc, Mapping) and "record" in doc:
        return RecordRef(resolve(doc["record"]))
    raise SchemaError(f"malformed type expression {doc!r}")


def records_from_dicts(docs: Iterable[Mapping[str, Any]],
                       registry: TypeRegistry | None = None) -> dict[str, RecordType]:
    """Build (and register) every record in ``docs``, nested ones first."""
    registry = registry or default_registry
    pending = {d["name"]: d for d in docs}
    built: dict[str, RecordType] = {}

    def build(name: str, path: tuple[str, ...]) -> RecordType:
        if name in built:
            return built[name]
        if name in path:
            raise CyclicType(path + (name,))
        if name not in pending:
            return registry.lookup(name)
        doc = pending[name]
        slots = []
        for sdoc in doc.get("slots", []):
            for ref in _referenced_names(sdoc.get("type")):
                build(ref, path + (name,))
            slots.append(SlotSpec(
                name=sdoc.get("name", ""),
                slot_type=_parse_type_doc(sdoc.get("type"), lambda n: build(n, path + (name,))),
                description=sdoc.get("description", ""),
                optional=bool(sdoc.get("optional", False)),
                enum=tuple(sdoc["enum"]) if sdoc.get("enum") is not None else None,
            ))
        built[name] = define_record(name, slots, doc.get("description", ""), registry=registry)
        return built[name]

    for name in pending:
        build(name, ())
    return built


def record_from_dict(doc: Mapping[str, Any], registry: TypeRegistry | None = None) -> RecordType:
    """One declared record; nested references must already be registered."""
    return records_from_dicts([doc], registry)[doc["name"]]
