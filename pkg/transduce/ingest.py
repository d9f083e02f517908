"""
ingest.py
---------
Typed states from generic inputs: CSV files, already-parsed rows, JSON
arrays and free text.

Columns bind to slots by normalized name (lowercase, only [a-z0-9]), so
"Credit History" binds to ``credit_history``. Cells are coerced to the
slot kind; an empty cell is null for optional slots.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Iterable, Optional, Union

from transduce.errors import (
    CsvParseError,
    ElementValidationError,
    HeaderBindingFailure,
    ParseError,
    RowCoercionError,
    UnknownSlot,
    ValidationFailure,
)
from transduce.schema_core import (
    TEXT,
    Basic,
    BasicKind,
    ListOf,
    RecordRef,
    RecordType,
    SlotSpec,
    State,
    parse_json,
    validate,
)
from transduce.settings import TransductionConfig
from transduce.transduction import Backend, Transduction, invoke, make_transduction

logger = logging.getLogger(__name__)

CsvSource = Union[str, os.PathLike, bytes, IO[str], IO[bytes]]

GENERIC_INPUT = RecordType(
    "GenericInput",
    (SlotSpec("content", TEXT, "raw input text"),),
    "untyped input to be parsed into a record",
)

_TRUE = {"true", "yes", "1"}
_FALSE = {"false", "no", "0"}


def normalize(name: str) -> str:
    return re.sub(r"[^0-9a-z]", "", str(name).lower())


# ============================================================
#  Header binding and cell coercion
# ============================================================

def bind_columns(columns: Iterable[str], record_type: RecordType,
                 header_map: Optional[Mapping[str, str]] = None) -> dict[str, str]:
    """Return slot -> column for every slot that binds."""
    columns = list(columns)
    binding: dict[str, str] = {}
    if header_map is not None:
        for column, slot_name in header_map.items():
            if slot_name not in record_type:
                raise UnknownSlot(slot_name)
            if column in columns:
                binding[slot_name] = column
    else:
        by_norm: dict[str, str] = {}
        for column in columns:
            by_norm.setdefault(normalize(column), column)
        for s in record_type.slots:
            column = by_norm.get(normalize(s.name))
            if column is not None:
                binding[s.name] = column
    for s in record_type.slots:
        if s.name not in binding and not s.optional:
            raise HeaderBindingFailure(s.name)
    return binding


def _coerce_cell(cell: str, s: SlotSpec) -> Any:
    """Raise ValueError when the text cannot be read as the slot's kind."""
    texpr = s.slot_type
    if cell.strip() == "":
        if s.optional:
            return None
        if texpr == TEXT:
            return cell
        raise ValueError("empty cell")
    if isinstance(texpr, Basic):
        text = cell.strip()
        if texpr.kind is BasicKind.TEXT:
            return cell
        if texpr.kind is BasicKind.INTEGER:
            return int(text)
        if texpr.kind is BasicKind.REAL:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError("non-finite real")
            return value
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    parsed = json.loads(cell)
    if isinstance(texpr, ListOf) and not isinstance(parsed, list):
        raise ValueError("not a JSON array")
    if isinstance(texpr, RecordRef) and not isinstance(parsed, dict):
        raise ValueError("not a JSON object")
    return parsed


def _row_state(row_no: int, row: Mapping[str, Any], binding: Mapping[str, str], record_type: RecordType) -> State:
    values: dict[str, Any] = {}
    for s in record_type.slots:
        column = binding.get(s.name)
        if column is None:
            values[s.name] = None
            continue
        raw = row.get(column)
        if isinstance(raw, str):
            try:
                raw = _coerce_cell(raw, s)
            except ValueError:
                raise RowCoercionError(row_no, column, s.slot_type.describe()) from None
        values[s.name] = raw
    try:
        return validate(values, record_type)
    except ValidationFailure as e:
        slot_name = e.slot.split(".")[0].split("[")[0]
        column = binding.get(slot_name, slot_name)
        expected = record_type.slot(slot_name).slot_type.describe() if slot_name in record_type else "value"
        raise RowCoercionError(row_no, column, expected) from e


def from_rows(rows: Iterable[Mapping[str, Any]], record_type: RecordType,
              header_map: Optional[Mapping[str, str]] = None) -> list[State]:
    """Rows are mappings column -> value; string values are coerced like CSV cells."""
    rows = list(rows)
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    if not rows:
        return []
    binding = bind_columns(columns, record_type, header_map)
    return [_row_state(i, row, binding, record_type) for i, row in enumerate(rows, start=1)]


# ============================================================
#  CSV
# ============================================================

def _read_text(source: CsvSource) -> str:
    if isinstance(source, (str, os.PathLike)):
        with Path(source).open(mode="r", encoding="utf-8", newline="") as f:
            return f.read()
    if isinstance(source, bytes):
        return source.decode("utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def from_csv(source: CsvSource, record_type: RecordType,
             header_map: Optional[Mapping[str, str]] = None) -> list[State]:
    """One State per data row, in row order. Row numbers in errors count data rows from 1."""
    try:
        text = _read_text(source)
    except UnicodeDecodeError as e:
        raise CsvParseError(f"input is not UTF-8: {e}") from e
    try:
        rows = [row for row in csv.reader(io.StringIO(text, newline=""), strict=True) if row]
    except csv.Error as e:
        raise CsvParseError(str(e)) from e
    if not rows:
        raise CsvParseError("no header row")
    header, data = rows[0], rows[1:]
    binding = bind_columns(header, record_type, header_map)
    states = []
    for row_no, row in enumerate(data, start=1):
        if len(row) > len(header):
            raise CsvParseError(f"row {row_no} has {len(row)} cells for {len(header)} columns")
        cells = dict(zip(header, row + [""] * (len(header) - len(row))))
        states.append(_row_state(row_no, cells, binding, record_type))
    logger.debug("read %d %s rows", len(states), record_type.name)
    return states


# ============================================================
#  JSON / text
# ============================================================

def from_json_array(text: Union[str, bytes], record_type: RecordType) -> list[State]:
    doc = parse_json(text)
    if not isinstance(doc, list):
        raise ParseError("expected a JSON array")
    states = []
    for i, item in enumerate(doc):
        try:
            states.append(validate(item, record_type))
        except ValidationFailure as e:
            raise ElementValidationError(i, e) from e
    return states


async def from_text(text: str, record_type: RecordType, backend: Backend | None = None,
                    config: TransductionConfig | None = None) -> Transduction:
    """``T << GenericInput`` applied to ``text``."""
    f = make_transduction(record_type, GENERIC_INPUT, config, backend, name=f"parse {record_type.name}")
    return await invoke(f, State(GENERIC_INPUT, content=text))


# ============================================================
#  Data sources
# ============================================================

@dataclass(frozen=True)
class DataSource:
    name: str
    states: tuple[State, ...]

    def __len__(self) -> int:
        return len(self.states)


def load_source(name: str, path: str, record_type: RecordType, fmt: str = "csv",
                header_map: Optional[Mapping[str, str]] = None) -> DataSource:
    if fmt == "csv":
        states = from_csv(path, record_type, header_map)
    else:
        with open(path, encoding="utf-8") as f:
            states = from_json_array(f.read(), record_type)
    logger.info("[+] Source %s: %d %s states from %s", name, len(states), record_type.name, path)
    return DataSource(name, tuple(states))
