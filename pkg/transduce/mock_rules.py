"""
mock_rules.py
-------------
Declarative rule files for the mock backend.

A rule file is a JSON list; each rule matches on source/target type names
and an instructions substring, and says how to fill every target slot:

    {"name": "evidence",
     "match": {"source": "Observation", "target": "IntermediateEvidence"},
     "slots": {"evidence": {"op": "concat", "from": "finding", "sep": "; "}},
     "explanation": "joined findings", "confidence": 0.9}

Ops read the named ``from`` slot of the input state, or of every element
when the function runs over a list.
"""
from __future__ import annotations

import json
import logging
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from transduce.backend import MockBackend, MockOutput, MockRule
from transduce.common import canonical_dumps
from transduce.errors import ConfigError
from transduce.schema_core import State, to_plain
from transduce.transduction import Payload, TransducibleFunction

logger = logging.getLogger(__name__)

Op = Literal["const", "copy", "first", "sum", "max", "min", "count", "concat", "union", "collect", "pick", "upper"]


class SlotRule(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    op: Op
    from_: Optional[str] = Field(None, alias="from")
    value: Any = None
    sep: str = " "
    index: int = 0
    where: Optional[dict[str, Any]] = None


class MatchDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Optional[str] = None
    target: Optional[str] = None
    instructions: Optional[str] = None


class RuleDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = ""
    match: MatchDoc = Field(default_factory=MatchDoc)
    slots: dict[str, SlotRule] = Field(default_factory=dict)
    explanation: Optional[str] = None
    confidence: float = 1.0


# ============================================================
#  Slot ops
# ============================================================

def _elements(x: Payload) -> list[State]:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _matches(state: State, where: Optional[dict[str, Any]]) -> bool:
    return not where or all(state.get(k) == v for k, v in where.items())


def _flatten(values: list[Any]) -> list[Any]:
    out = []
    for v in values:
        if isinstance(v, (list, tuple)):
            out.extend(v)
        else:
            out.append(v)
    return out


def apply_op(rule: SlotRule, x: Payload) -> tuple[Any, Optional[list[int]]]:
    """Return (value, contributing element indices or None for all)."""
    elements = _elements(x)
    chosen = [(i, e) for i, e in enumerate(elements) if _matches(e, rule.where)]
    if rule.from_ is not None:
        present = [(i, e[rule.from_]) for i, e in chosen if e.get(rule.from_) is not None]
    else:
        present = [(i, e) for i, e in chosen]
    values = [v for _, v in present]
    used = [i for i, _ in present] or None

    op = rule.op
    if op == "const":
        return rule.value, None
    if op in ("copy", "first"):
        return (values[0] if values else None), (used[:1] if used else None)
    if op == "sum":
        return sum(values), used
    if op == "max":
        return (max(values) if values else None), used
    if op == "min":
        return (min(values) if values else None), used
    if op == "count":
        return len(values), used
    if op == "concat":
        return rule.sep.join(str(v) for v in _flatten(values)), used
    if op == "union":
        seen: dict[str, Any] = {}
        for v in _flatten(values):
            seen.setdefault(canonical_dumps(to_plain(v)), to_plain(v))
        return list(seen.values()), used
    if op == "collect":
        return [to_plain(v) for v in values], used
    if op == "pick":
        pool = _flatten(values) if not isinstance(x, (list, tuple)) else values
        return (pool[rule.index] if -len(pool) <= rule.index < len(pool) else None), used
    if op == "upper":
        return (str(values[0]).upper() if values else None), (used[:1] if used else None)
    raise ConfigError(f"unknown op {op!r}", field="op")


def _producer(doc: RuleDoc):
    def produce(x: Payload, spec: TransducibleFunction) -> MockOutput:
        source_slots = list(spec.source.slot_names)
        values: dict[str, Any] = {}
        prov: dict[str, list[str]] = {}
        evidence: dict[str, list[int]] = {}
        n = len(x) if isinstance(x, (list, tuple)) else None
        for name in spec.target.slot_names:
            slot_rule = doc.slots.get(name)
            if slot_rule is None:
                values[name] = None
                prov[name] = source_slots
                if n is not None:
                    evidence[name] = list(range(n))
                continue
            value, used = apply_op(slot_rule, x)
            values[name] = value
            prov[name] = [slot_rule.from_] if slot_rule.from_ and slot_rule.from_ in spec.source else source_slots
            if n is not None:
                evidence[name] = used or list(range(n))
        cited = {s for p in prov.values() for s in p}
        return MockOutput(
            values,
            doc.explanation or f"mock rule {doc.name or '?'}",
            [s for s in source_slots if s in cited] or source_slots,
            doc.confidence,
            prov,
            evidence if n is not None else None,
        )

    return produce


def rules_from_docs(docs: list[Any]) -> list[MockRule]:
    if not isinstance(docs, list):
        raise ConfigError("a rules file must hold a JSON list of rules")
    rules = []
    for i, raw in enumerate(docs):
        try:
            doc = RuleDoc.model_validate(raw)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first.get("loc", ()))
            raise ConfigError(f"rule {i}: {where}: {first.get('msg')}", field=where) from e
        rules.append(MockRule(
            _producer(doc),
            source=doc.match.source,
            target=doc.match.target,
            instructions=doc.match.instructions,
            name=doc.name or f"rule{i}",
        ))
    return rules


def load_rules(path: str) -> list[MockRule]:
    try:
        with open(path, encoding="utf-8") as f:
            docs = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"mock rules file not found: {path}", field="rules") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"mock rules file {path} is not valid JSON: {e}", field="rules") from e
    rules = rules_from_docs(docs)
    logger.info("[+] Loaded %d mock rules from %s", len(rules), path)
    return rules


def mock_backend_from_file(path: str) -> MockBackend:
    return MockBackend(load_rules(path))
