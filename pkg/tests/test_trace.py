import logging

import pytest

from transduce import trace
from transduce.backend import MockBackend
from transduce.errors import SinkUnavailable, UnknownRecord
from transduce.mapreduce import map_states, reduce_states
from transduce.settings import ExecutionPolicy
from transduce.transduction import compose, invoke, lift_deterministic, make_transduction
from tests.conftest import APPLICANT, FLAG, NUMBER, RISK, numbers, plus, risk_rule, run, smith

FLAG_HIGH = lift_deterministic(lambda r: {"on": r.risk_class == "high"}, RISK, FLAG, {"on": ["risk_class"]},
                               name="flag_high")
SUM = lift_deterministic(lambda xs: {"value": sum(x.value for x in xs)}, NUMBER, NUMBER,
                         {"value": ["value"]}, name="sum", over_collection=True)


def risk_fn():
    return make_transduction(RISK, APPLICANT, backend=MockBackend([risk_rule(0.9)]))


def test_one_record_per_invocation(sink):
    result = run(invoke(risk_fn(), smith()))
    (rec,) = sink.records()
    assert rec.record_id == result.record_id == 1
    assert rec.parent_id is None
    assert rec.kind == "backend"
    assert rec.model == "mock"
    assert rec.status == trace.STATUS_OK
    assert rec.output == {"risk_score": 61, "risk_class": "medium"}
    assert rec.explanation["confidence"] == 0.9
    assert rec.provenance["risk_score"] == ["debt", "income"]
    assert rec.input["last_name"] == "Smith"
    assert rec.input_digest


def test_composition_nests_stage_records(sink):
    f = compose(FLAG_HIGH, risk_fn())
    result = run(invoke(f, smith()))
    envelope = sink.get(result.record_id)
    assert envelope.kind == "composed"
    stages = trace.children_of(sink, envelope.record_id)
    assert [s.kind for s in stages] == ["backend", "deterministic"]
    assert stages[1].upstream == [stages[0].record_id]
    assert envelope.provenance == {"on": ["credit_history", "debt", "income"]}


def test_lineage_follows_upstream_links(sink):
    result = run(invoke(compose(FLAG_HIGH, risk_fn()), smith()))
    flag_record = trace.children_of(sink, result.record_id)[-1]
    lin = trace.lineage(sink, flag_record.record_id)
    assert lin.chain == [flag_record.record_id, result.record_id]
    assert lin.evidence == {"on": ["credit_history", "debt", "income"]}


def test_lineage_through_map_and_reduce(sink):
    mapped = run(map_states(plus(1), numbers(1, 2, 3, 4, 5)))
    reduced = run(reduce_states(SUM, mapped.states(), ExecutionPolicy(batch_size=2), upstream=mapped.record_ids()))
    lin = trace.lineage(sink, reduced.record_id)
    assert lin.evidence == {"value": ["value"]}
    leaves = [r for r in sink.records() if r.kind == "deterministic" and r.source == "Number"
              and r.upstream and set(r.upstream) <= set(mapped.record_ids())]
    assert len(leaves) == 3


def test_unknown_record(sink):
    with pytest.raises(UnknownRecord):
        trace.lineage(sink, 99)
    with pytest.raises(UnknownRecord):
        sink.get(99)


def test_failed_invocation_is_recorded(sink):
    boom = lift_deterministic(lambda x: 1 / 0, NUMBER, NUMBER, {"value": ["value"]}, name="boom")
    with pytest.raises(ZeroDivisionError):
        run(invoke(boom, numbers(1)[0]))
    (rec,) = sink.records()
    assert rec.status == trace.STATUS_ERROR
    assert rec.error.startswith("ZeroDivisionError")
    assert trace.show(sink, status=trace.STATUS_OK) == ""
    assert "error=ZeroDivisionError" in trace.show(sink, status=trace.STATUS_ERROR)


def test_jsonl_sink_round_trip(tmp_path):
    path = str(tmp_path / "trace.jsonl")
    sink = trace.JsonlSink(path)
    with trace.tracing(sink):
        run(map_states(plus(2), numbers(1, 2, 3), ExecutionPolicy(max_concurrency=3)))
    sink.compact()
    loaded = trace.load_jsonl(path)
    assert [r.record_id for r in loaded] == [1, 2, 3, 4]
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in sink.records()]
    with open(path, "rb") as f:
        assert trace.load_jsonl(f.read()) == loaded
    assert trace.export_jsonl(loaded) == open(path, "rb").read()


def test_show_lists_in_id_order(sink):
    run(map_states(plus(1), numbers(1, 2)))
    lines = trace.show(sink).splitlines()
    assert lines[0].startswith("#1    parent=-")
    assert "map" in lines[0]
    assert lines[1].startswith("#2    parent=1")


def test_unwritable_sink_fails(tmp_path):
    sink = trace.JsonlSink(str(tmp_path / "missing" / "trace.jsonl"))
    with trace.tracing(sink):
        with pytest.raises(SinkUnavailable):
            run(invoke(plus(1), numbers(1)[0]))


def test_unwritable_sink_can_warn(tmp_path, caplog):
    sink = trace.JsonlSink(str(tmp_path / "missing" / "trace.jsonl"), on_error="warn")
    with caplog.at_level(logging.WARNING), trace.tracing(sink):
        result = run(invoke(plus(1), numbers(1)[0]))
    assert result.state.value == 2
    assert len(sink) == 1
    assert "Dropped trace record 1" in caplog.text


def test_sink_rejects_unknown_error_mode():
    with pytest.raises(ValueError):
        trace.MemorySink(on_error="ignore")


def test_tracing_scopes_are_isolated():
    a, b = trace.MemorySink(), trace.MemorySink()
    with trace.tracing(a):
        run(invoke(plus(1), numbers(1)[0]))
        with trace.tracing(b):
            run(invoke(plus(1), numbers(1)[0]))
    assert len(a) == 1 and len(b) == 1


def test_empty_sink_is_bound_by_tracing():
    empty = trace.MemorySink()
    assert len(empty) == 0
    with trace.tracing(empty):
        assert trace.current_sink() is empty
        result = run(invoke(plus(1), numbers(1)[0]))
    assert [r.record_id for r in empty.records()] == [result.record_id]


def test_jsonl_sink_starts_empty_and_fills(tmp_path):
    sink = trace.JsonlSink(str(tmp_path / "trace.jsonl"))
    with trace.tracing(sink):
        run(map_states(plus(1), numbers(1, 2, 3)))
    sink.compact()
    assert len(trace.load_jsonl(sink.path)) == 4


def test_unbound_invocations_are_not_kept():
    default = trace.current_sink()
    assert isinstance(default, trace.DiscardSink)
    before = len(default)
    for v in range(200):
        run(invoke(plus(1), numbers(v)[0]))
    assert len(default) == before == 0
