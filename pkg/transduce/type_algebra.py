"""
type_algebra.py
---------------
Merge (&), projection and composition (@) on record types and states.

Merge keeps the left operand's slots first and lets the left operand win
on shared slots; a null on the left is filled from the right.
Composition pairs two records under ``left`` / ``right``; the ``@``
operator on RecordType/State puts its right-hand operand under ``left``.
"""
from __future__ import annotations

from typing import Iterable

from transduce.errors import EmptyProjection, SlotTypeConflict, UnknownSlot
from transduce.schema_core import RecordType, SlotSpec, State, record, validate


# ============================================================
#  Merge
# ============================================================

def _merged_name(x: RecordType, y: RecordType) -> str:
    parts = x.name.split("&")
    parts += [p for p in y.name.split("&") if p not in parts]
    return "&".join(parts)


def merge_types(x: RecordType, y: RecordType) -> RecordType:
    for s in y.slots:
        if s.name in x and x.slot(s.name).slot_type != s.slot_type:
            raise SlotTypeConflict(s.name)
    slots = x.slots + tuple(s for s in y.slots if s.name not in x)
    name = _merged_name(x, y)
    description = x.description or y.description
    if name == x.name and slots == x.slots and description == x.description:
        return x
    return RecordType(name, slots, description)


def merge_states(x: State, y: State) -> State:
    merged = merge_types(x.record_type, y.record_type)
    values = {}
    for name in merged.slot_names:
        left = x.get(name)
        values[name] = left if left is not None else y.get(name)
    return validate(values, merged)


# ============================================================
#  Projection
# ============================================================

def _base_name(name: str) -> str:
    if name.endswith("]") and "[" in name:
        return name[: name.rindex("[")]
    return name


def project_type(x: RecordType, names: Iterable[str]) -> RecordType:
    wanted = set(names)
    if not wanted:
        raise EmptyProjection()
    unknown = sorted(n for n in wanted if n not in x)
    if unknown:
        raise UnknownSlot(unknown[0])
    slots = tuple(s for s in x.slots if s.name in wanted)
    if slots == x.slots:
        return x
    label = ",".join(s.name for s in slots)
    return RecordType(f"{_base_name(x.name)}[{label}]", slots, x.description)


def project_state(x: State, names: Iterable[str]) -> State:
    projected = project_type(x.record_type, names)
    if projected is x.record_type:
        return x
    return validate({n: x[n] for n in projected.slot_names}, projected)


# ============================================================
#  Composition
# ============================================================

def compose_types(x: RecordType, y: RecordType) -> RecordType:
    return RecordType(
        f"{y.name}@{x.name}",
        (
            SlotSpec("left", record(x), "original state"),
            SlotSpec("right", record(y), "derived state"),
        ),
    )


def compose_states(x: State, y: State) -> State:
    return validate({"left": x, "right": y}, compose_types(x.record_type, y.record_type))
