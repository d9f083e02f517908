import asyncio

import pytest

from transduce import trace
from transduce.backend import MockBackend, MockOutput, MockRule
from transduce.schema_core import BOOLEAN, INTEGER, REAL, TEXT, RecordType, State, list_of, slot
from transduce.transduction import ProvenanceMap, lift_deterministic

# Shared record types
APPLICANT = RecordType("Applicant", (
    slot("last_name", TEXT),
    slot("income", REAL),
    slot("debt", REAL),
    slot("credit_history", TEXT),
))
RISK = RecordType("Risk", (
    slot("risk_score", INTEGER),
    slot("risk_class", TEXT, enum=("low", "medium", "high")),
))
QUESTION = RecordType("Question", (slot("prompt", TEXT), slot("options", list_of(TEXT))))
ANSWER = RecordType("Answer", (slot("options", list_of(TEXT)), slot("choice", TEXT)))
NUMBER = RecordType("Number", (slot("value", INTEGER),))
TOTAL = RecordType("Total", (slot("total", INTEGER), slot("seen", INTEGER)))
FLAG = RecordType("Flag", (slot("on", BOOLEAN, optional=True),))


def run(coro):
    return asyncio.run(coro)


def numbers(*values):
    return [State(NUMBER, value=v) for v in values]


def smith():
    return State(APPLICANT, last_name="Smith", income=60000.0, debt=25000.0,
                 credit_history="late payment in 2021")


def plus(k, name=None):
    """Number -> Number, value + k."""
    return lift_deterministic(lambda x: {"value": x.value + k}, NUMBER, NUMBER,
                              {"value": ["value"]}, name=name or f"plus{k}")


def times(k, name=None):
    return lift_deterministic(lambda x: {"value": x.value * k}, NUMBER, NUMBER,
                              {"value": ["value"]}, name=name or f"times{k}")


def sum_rule():
    """Mock reducer Number^N -> Number summing ``value``."""

    def produce(xs, spec):
        return MockOutput({"value": sum(x.value for x in xs)}, "sum", ["value"], 1.0, {"value": ["value"]})

    return MockRule(produce, source="Number", target="Number", name="sum")


def risk_rule(confidence=0.9):
    def produce(x, spec):
        ratio = x.debt / x.income
        return MockOutput(
            {"risk_score": int(ratio * 100) + 20, "risk_class": "medium" if ratio < 0.5 else "high"},
            "debt-to-income ratio is moderate; a late payment raises risk",
            ["income", "debt", "credit_history"],
            confidence,
            {"risk_score": ["income", "debt"], "risk_class": ["income", "debt", "credit_history"]},
        )

    return MockRule(produce, source="Applicant", target="Risk", name="risk")


@pytest.fixture
def sink():
    s = trace.MemorySink()
    with trace.tracing(s):
        yield s


@pytest.fixture
def mock_sum():
    return MockBackend([sum_rule()])


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("TRANSDUCE_DATA_DIR", str(tmp_path / "data"))
    return tmp_path / "data" / "runs"


def full_provenance(source, target):
    return ProvenanceMap.full(source, target)
