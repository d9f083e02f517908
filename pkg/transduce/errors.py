"""
errors.py
---------
Exception hierarchy for the transduction engine.

Every error names the thing that went wrong (slot, index, attempt count)
as attributes so callers and tests can branch on them without parsing
messages.
"""
from __future__ import annotations

from typing import Any, Iterable


class TransduceError(Exception):
    """Root of every error raised by the package."""


# ============================================================
#  Schema / validation
# ============================================================

class SchemaError(TransduceError):
    """A record type definition is malformed."""


class DuplicateSlot(SchemaError):
    def __init__(self, record: str, slot: str):
        self.record = record
        self.slot = slot
        super().__init__(f"record {record!r} declares slot {slot!r} more than once")


class DuplicateRecord(SchemaError):
    def __init__(self, record: str):
        self.record = record
        super().__init__(f"record {record!r} is already registered with a different definition")


class CyclicType(SchemaError):
    def __init__(self, cycle: Iterable[str]):
        self.cycle = tuple(cycle)
        super().__init__("record references form a cycle: " + " -> ".join(self.cycle))


class UnknownRecordType(SchemaError):
    def __init__(self, record: str):
        self.record = record
        super().__init__(f"record type {record!r} is not declared")


class ValidationFailure(TransduceError):
    """A single-slot validation problem. ``slot`` is a dotted path."""

    slot: str


class MissingSlot(ValidationFailure):
    def __init__(self, slot: str):
        self.slot = slot
        super().__init__(f"missing value for required slot {slot!r}")


class TypeMismatch(ValidationFailure):
    def __init__(self, slot: str, expected: str, found: str):
        self.slot = slot
        self.expected = expected
        self.found = found
        super().__init__(f"slot {slot!r} expected {expected}, found {found}")


class UnknownSlot(ValidationFailure):
    def __init__(self, slot: str):
        self.slot = slot
        super().__init__(f"unknown slot {slot!r}")


class ParseError(TransduceError):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"could not parse JSON: {detail}")


# ============================================================
#  Type algebra
# ============================================================

class SlotTypeConflict(TransduceError):
    def __init__(self, slot: str):
        self.slot = slot
        super().__init__(f"slot {slot!r} has different types on the two sides of a merge")


class EmptyProjection(TransduceError):
    def __init__(self) -> None:
        super().__init__("projection onto an empty slot set")


# ============================================================
#  Transduction
# ============================================================

class CompositionTypeMismatch(TransduceError):
    def __init__(self, produced: str, expected: str):
        self.produced = produced
        self.expected = expected
        super().__init__(f"cannot compose: first stage produces {produced!r}, second expects {expected!r}")


class KernelOutputInvalid(TransduceError):
    def __init__(self, cause: ValidationFailure):
        self.cause = cause
        super().__init__(f"procedure output failed validation ({type(cause).__name__}): {cause}")


class UnsupportedFeature(TransduceError):
    def __init__(self, feature: str):
        self.feature = feature
        super().__init__(f"{feature} is not supported")


class ConfigError(TransduceError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


# ============================================================
#  Backend
# ============================================================

class SchemaViolation(TransduceError):
    """Model output did not satisfy the target type or envelope contract."""

    def __init__(self, detail: str, cause: Exception | None = None, attempts: int | None = None):
        self.detail = detail
        self.cause = cause
        self.attempts = attempts
        super().__init__(detail)


class InvalidProvenance(SchemaViolation):
    def __init__(self, detail: str):
        super().__init__(f"invalid provenance: {detail}")


class InvalidConfidence(SchemaViolation):
    def __init__(self, value: Any):
        self.value = value
        super().__init__(f"confidence {value!r} is outside [0, 1]")


class BackendUnavailable(TransduceError):
    pass


class TransportError(BackendUnavailable):
    pass


class Timeout(BackendUnavailable):
    pass


class NoMatchingRule(TransduceError):
    def __init__(self, source: str, target: str):
        self.source = source
        self.target = target
        super().__init__(f"no mock rule matches {target} << {source}")


# ============================================================
#  Map / reduce
# ============================================================

class EmptyCollection(TransduceError):
    def __init__(self) -> None:
        super().__init__("reduce needs at least one element")


class ElementError(TransduceError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"element {index} failed: {type(cause).__name__}: {cause}")


class StagingTypeMismatch(TransduceError):
    def __init__(self, element: str, target: str):
        self.element = element
        self.target = target
        super().__init__(
            f"staged reduce needs a combiner: partials of type {target!r} "
            f"cannot be fed back into a reducer over {element!r}"
        )


# ============================================================
#  Ingest
# ============================================================

class HeaderBindingFailure(TransduceError):
    def __init__(self, slot: str):
        self.slot = slot
        super().__init__(f"no column binds to required slot {slot!r}")


class RowCoercionError(TransduceError):
    def __init__(self, row: int, column: str, expected: str):
        self.row = row
        self.column = column
        self.expected = expected
        super().__init__(f"row {row}, column {column!r}: cannot read value as {expected}")


class CsvParseError(TransduceError):
    pass


class ElementValidationError(TransduceError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"element {index}: {cause}")


# ============================================================
#  Trace
# ============================================================

class SinkUnavailable(TransduceError):
    pass


class UnknownRecord(TransduceError):
    def __init__(self, record_id: int):
        self.record_id = record_id
        super().__init__(f"no trace record with id {record_id}")


# ============================================================
#  Workflow
# ============================================================

class WorkflowError(TransduceError):
    """Workflow file failed validation; ``diagnostics`` lists every finding."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics) or "invalid workflow")
