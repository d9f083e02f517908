import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transduce import trace
from transduce.backend import MockBackend, MockRule
from transduce.errors import CompositionTypeMismatch, ElementError, EmptyCollection, StagingTypeMismatch
from transduce.mapreduce import (
    as_transducible,
    map_reduce,
    map_states,
    plan_batches,
    reduce_per_group,
    reduce_states,
)
from transduce.schema_core import INTEGER, RecordType, State, list_of, slot
from transduce.settings import ExecutionPolicy, TransductionConfig
from transduce.transduction import invoke, lift_deterministic, make_reducer, make_transduction
from tests.conftest import NUMBER, TOTAL, numbers, run

BAG = RecordType("Bag", (slot("items", list_of(INTEGER)),))


def reducer(fn, source=NUMBER, target=NUMBER, prov=None):
    return lift_deterministic(fn, source, target, prov or {n: source.slot_names for n in target.slot_names},
                              over_collection=True)


SUM = reducer(lambda xs: {"value": sum(x.value for x in xs)})
MAX = reducer(lambda xs: {"value": max(x.value for x in xs)})
UNION = reducer(lambda xs: {"items": sorted(i for x in xs for i in x.items)}, BAG, BAG)


def double_rule():
    return MockRule(lambda x, spec: {"value": x.value * 2}, source="Number", target="Number", name="double")


def policy(**kw):
    return ExecutionPolicy(**kw)


# ---------- map ----------

@settings(max_examples=500, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=0.001), min_size=1, max_size=12))
def test_map_preserves_order_under_random_latency(delays):
    backend = MockBackend([double_rule()], latency=lambda x: delays[x.value])
    f = make_transduction(NUMBER, NUMBER, backend=backend)
    result = run(map_states(f, numbers(*range(len(delays))), policy(max_concurrency=4)))
    assert [s.value for s in result.states()] == [2 * i for i in range(len(delays))]
    assert backend.max_in_flight <= 4


def test_in_flight_never_exceeds_bound():
    backend = MockBackend([double_rule()], latency=lambda x: 0.001)
    f = make_transduction(NUMBER, NUMBER, backend=backend)
    run(map_states(f, numbers(*range(20)), policy(max_concurrency=3)))
    assert backend.calls == 20
    assert backend.max_in_flight == 3


def test_map_of_nothing():
    result = run(map_states(make_transduction(NUMBER, NUMBER), []))
    assert len(result) == 0
    assert result.ok


def failing_at(index, calls):
    def proc(x):
        calls.append(x.value)
        if x.value == index:
            raise ValueError(f"bad element {index}")
        return {"value": x.value}

    return lift_deterministic(proc, NUMBER, NUMBER, {"value": ["value"]}, name="maybe")


def test_collect_mode_keeps_going(sink):
    calls = []
    result = run(map_states(failing_at(3, calls), numbers(*range(6)), policy(failure_mode="collect")))
    assert sorted(calls) == list(range(6))
    assert [e.index for e in result.errors()] == [3]
    assert [s.value for s in result.states()] == [0, 1, 2, 4, 5]
    with pytest.raises(ElementError) as e:
        result.raise_first()
    assert e.value.index == 3
    envelope = sink.get(result.record_id)
    assert envelope.kind == "map"
    assert envelope.detail == {"count": 6, "failures": 1}


def test_fail_fast_stops_early(sink):
    calls = []
    xs = numbers(*range(10))
    with pytest.raises(ElementError) as e:
        run(map_states(failing_at(2, calls), xs, policy(failure_mode="fail_fast", max_concurrency=1)))
    assert e.value.index == 2
    assert isinstance(e.value.cause, ValueError)
    assert calls == [0, 1, 2]
    statuses = [r.status for r in sink.records() if r.kind == "deterministic"]
    assert len(statuses) == len(xs)
    assert statuses.count(trace.STATUS_OK) == 2
    assert statuses.count(trace.STATUS_ERROR) == 1
    assert statuses.count(trace.STATUS_CANCELLED) == 7


def test_fail_fast_with_suspending_calls(sink):
    calls = []

    async def proc(x):
        calls.append(x.value)
        await asyncio.sleep(0)
        if x.value == 1:
            raise ValueError("bad element 1")
        return {"value": x.value}

    f = lift_deterministic(proc, NUMBER, NUMBER, {"value": ["value"]}, name="async_maybe")
    with pytest.raises(ElementError) as e:
        run(map_states(f, numbers(*range(20)), policy(failure_mode="fail_fast", max_concurrency=2)))
    assert e.value.index == 1
    assert len(calls) <= 3
    envelope = next(r for r in sink.records() if r.kind == "map")
    assert envelope.status == trace.STATUS_ERROR


# ---------- staged reduce ----------

def test_plan_for_ten_elements_batch_three():
    levels = plan_batches(10, 3)
    assert [len(level) for level in levels] == [4, 2, 1]
    assert levels[0] == [(0, 3), (3, 6), (6, 9), (9, 10)]
    assert levels[1] == [(0, 3), (3, 4)]


def test_plan_needs_elements():
    with pytest.raises(EmptyCollection):
        plan_batches(0, 3)


@pytest.mark.parametrize("batch_size", range(2, 11))
def test_sum_one_to_ten_in_every_staging(batch_size):
    result = run(reduce_states(SUM, numbers(*range(1, 11)), policy(batch_size=batch_size)))
    assert result.state.value == 55
    assert result.element_evidence == {"value": tuple(range(10))}


def test_every_staging_of_fifty_elements():
    xs = numbers(*range(-20, 30))
    bags = [State(BAG, items=[i % 7, i % 3]) for i in range(50)]
    expected_bag = sorted(i for b in bags for i in b.items)
    for batch_size in range(2, 51):
        p = policy(batch_size=batch_size)
        assert run(reduce_states(SUM, xs, p)).state.value == sum(range(-20, 30))
        assert run(reduce_states(MAX, xs, p)).state.value == 29
        assert list(run(reduce_states(UNION, bags, p)).state.items) == expected_bag


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=1, max_size=50), st.integers(min_value=2, max_value=50))
def test_staged_reduce_equals_single_shot(values, batch_size):
    xs = numbers(*values)
    single = run(reduce_states(SUM, xs, policy(batch_size=max(2, len(xs)))))
    staged = run(reduce_states(SUM, xs, policy(batch_size=batch_size)))
    assert staged.state == single.state
    assert staged.provenance == single.provenance
    assert run(reduce_states(MAX, xs, policy(batch_size=batch_size))).state.value == max(values)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(0, 9), max_size=4), min_size=1, max_size=30),
       st.integers(min_value=2, max_value=30))
def test_multiset_union_is_staging_invariant(bags, batch_size):
    xs = [State(BAG, items=b) for b in bags]
    result = run(reduce_states(UNION, xs, policy(batch_size=batch_size)))
    assert list(result.state.items) == sorted(i for b in bags for i in b)


def test_reduce_trace_tree_shape(sink):
    result = run(reduce_states(SUM, numbers(*range(10)), policy(batch_size=3)))
    children = trace.children_of(sink, result.record_id)
    assert len(children) == 1
    top = children[0]
    level_two = trace.children_of(sink, top.record_id)
    assert len(level_two) == 2
    leaves = [c for r in level_two for c in trace.children_of(sink, r.record_id)]
    assert len(leaves) == 4
    assert len(sink) == 1 + 4 + 2 + 1
    assert sink.get(result.record_id).detail["levels"] == [4, 2, 1]


def test_function_batch_size_is_the_default(sink):
    sum3 = lift_deterministic(lambda xs: {"value": sum(x.value for x in xs)}, NUMBER, NUMBER,
                              {"value": ["value"]}, name="sum3", config=TransductionConfig(batch_size=3),
                              over_collection=True)
    result = run(reduce_states(sum3, numbers(*range(10))))
    assert result.state.value == 45
    assert sink.get(result.record_id).detail["levels"] == [4, 2, 1]
    explicit = run(reduce_states(sum3, numbers(*range(10)), policy(batch_size=5)))
    assert sink.get(explicit.record_id).detail["levels"] == [2, 1]


def test_type_changing_reducer_needs_combiner():
    count = reducer(lambda xs: {"total": sum(x.value for x in xs), "seen": len(xs)}, NUMBER, TOTAL)
    xs = numbers(*range(7))
    assert run(reduce_states(count, xs[:3], policy(batch_size=3))).state.seen == 3
    with pytest.raises(StagingTypeMismatch):
        run(reduce_states(count, xs, policy(batch_size=3)))

    combine = reducer(lambda ts: {"total": sum(t.total for t in ts), "seen": sum(t.seen for t in ts)},
                      TOTAL, TOTAL, {"total": ["total"], "seen": ["seen"]})
    result = run(reduce_states(count, xs, policy(batch_size=3), combiner=combine))
    assert result.state.as_dict() == {"total": 21, "seen": 7}
    assert result.provenance["seen"] == frozenset({"value"})


def test_staged_explanations_are_labeled():
    result = run(reduce_states(SUM, numbers(*range(5)), policy(batch_size=2)))
    assert result.explanation.explanation.splitlines()[0].startswith("[stage 1.1]")


def test_reduce_with_mock_backend_and_failures():
    failing = MockRule(lambda xs, spec: {"value": "oops"}, source="Number", target="Number")
    r = make_reducer(NUMBER, NUMBER, backend=MockBackend([failing]))
    with pytest.raises(ElementError):
        run(reduce_states(r, numbers(1, 2, 3, 4), policy(batch_size=2)))


# ---------- map-reduce ----------

def test_map_reduce_is_a_transducible_function(mock_sum):
    double = lift_deterministic(lambda x: {"value": x.value * 2}, NUMBER, NUMBER, {"value": ["value"]})
    total = make_reducer(NUMBER, NUMBER, backend=mock_sum)
    result = run(map_reduce(double, total, numbers(1, 2, 3, 4, 5), policy(batch_size=2)))
    assert result.state.value == 30
    assert result.provenance["value"] == frozenset({"value"})
    assert result.explanation.explanation.startswith("[map] 5 elements")

    f = as_transducible(double, total, policy(batch_size=2))
    assert f.over_collection
    again = run(invoke(f, numbers(1, 2, 3, 4, 5)))
    assert again.state == result.state


def test_reduce_per_group_in_group_order():
    groups = {"a": numbers(1, 2, 3), "b": numbers(10), "c": numbers(4, 4)}
    result = run(reduce_per_group(SUM, groups, policy(batch_size=2, max_concurrency=2)))
    assert [s.value for s in result.states()] == [6, 10, 8]


def test_reduce_rejects_pointwise_function():
    with pytest.raises(CompositionTypeMismatch):
        run(reduce_states(make_transduction(NUMBER, NUMBER), numbers(1)))


def test_sum_rule_reducer(mock_sum):
    r = make_reducer(NUMBER, NUMBER, backend=mock_sum)
    assert run(reduce_states(r, numbers(*range(1, 11)), policy(batch_size=3))).state.value == 55
    assert mock_sum.calls == 4 + 2 + 1
