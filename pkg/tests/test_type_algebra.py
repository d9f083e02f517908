import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transduce.errors import EmptyProjection, SlotTypeConflict, UnknownSlot
from transduce.schema_core import INTEGER, TEXT, RecordType, State, list_of, record, slot
from transduce.type_algebra import (
    compose_states,
    compose_types,
    merge_states,
    merge_types,
    project_state,
    project_type,
)
from tests.conftest import ANSWER, APPLICANT, QUESTION, smith


def test_merge_exposes_union_of_slots():
    merged = ANSWER & QUESTION
    assert set(merged.slot_names) == {"prompt", "options", "choice"}
    assert merged.slot_names == ("options", "choice", "prompt")
    assert merged.name == "Answer&Question"


def test_merge_is_idempotent_on_types():
    assert merge_types(QUESTION, QUESTION) is QUESTION


def test_merge_conflicting_slot_types():
    other = RecordType("Other", (slot("options", TEXT),))
    with pytest.raises(SlotTypeConflict) as e:
        merge_types(QUESTION, other)
    assert e.value.slot == "options"


def test_merge_states_left_wins_and_fills_nulls():
    left_t = RecordType("L", (slot("a", INTEGER, optional=True), slot("b", INTEGER)))
    right_t = RecordType("R", (slot("a", INTEGER), slot("c", INTEGER)))
    merged = State(left_t, a=None, b=2) & State(right_t, a=1, c=3)
    assert merged.as_dict() == {"a": 1, "b": 2, "c": 3}
    merged = State(left_t, a=5, b=2) & State(right_t, a=1, c=3)
    assert merged.a == 5


def test_projection_to_evidence_slots_drops_last_name():
    projected = APPLICANT.project(["income", "debt", "credit_history"])
    assert "last_name" not in projected
    assert projected.slot_names == ("income", "debt", "credit_history")
    assert projected.name == "Applicant[income,debt,credit_history]"
    state = project_state(smith(), ["credit_history", "income", "debt"])
    assert state.as_dict() == {"income": 60000.0, "debt": 25000.0, "credit_history": "late payment in 2021"}


def test_projection_onto_all_slots_is_the_same_type():
    assert project_type(APPLICANT, APPLICANT.slot_names) is APPLICANT


def test_projection_errors():
    with pytest.raises(EmptyProjection):
        project_type(APPLICANT, [])
    with pytest.raises(UnknownSlot):
        project_type(APPLICANT, ["income", "salary"])


def test_composition_pairs_left_and_right():
    composed = ANSWER @ QUESTION
    assert composed.slot_names == ("left", "right")
    assert composed.slot("left").slot_type == record(QUESTION)
    assert composed.slot("right").slot_type == record(ANSWER)
    assert composed == compose_types(QUESTION, ANSWER)


def test_composition_of_states():
    q = State(QUESTION, prompt="Which sensor?", options=["vibration", "voltage"])
    a = State(ANSWER, options=["vibration", "voltage"], choice="vibration")
    pair = a @ q
    assert pair.left == q
    assert pair.right == a
    assert pair == compose_states(q, a)


values = st.one_of(st.none(), st.integers(min_value=-5, max_value=5))


@given(values, values, values)
def test_state_merge_is_associative(a, b, c):
    t = RecordType("V", (slot("v", INTEGER, optional=True), slot("tags", list_of(TEXT), optional=True)))
    x, y, z = State(t, v=a), State(t, v=b), State(t, v=c)
    assert ((x & y) & z) == (x & (y & z))


# slot name -> (type, values); a name always carries the same type so merges never conflict
SLOT_POOL = {
    "a": (INTEGER, st.integers(min_value=-5, max_value=5)),
    "b": (TEXT, st.text(max_size=3)),
    "c": (INTEGER, st.integers(min_value=0, max_value=9)),
    "d": (list_of(TEXT), st.lists(st.text(max_size=2), max_size=2)),
}


@st.composite
def pooled_states(draw):
    name = draw(st.sampled_from(["P", "Q", "R"]))
    names = draw(st.lists(st.sampled_from(sorted(SLOT_POOL)), min_size=1, max_size=4, unique=True))
    description = draw(st.sampled_from(["", "first", "second"]))
    t = RecordType(name, tuple(slot(n, SLOT_POOL[n][0], optional=True) for n in names), description)
    return State(t, {n: draw(st.one_of(st.none(), SLOT_POOL[n][1])) for n in names})


@settings(max_examples=1000, deadline=None)
@given(pooled_states(), pooled_states(), pooled_states())
def test_merge_is_associative_across_distinct_types(x, y, z):
    X, Y, Z = x.record_type, y.record_type, z.record_type
    left, right = merge_types(merge_types(X, Y), Z), merge_types(X, merge_types(Y, Z))
    assert left == right
    assert set(left.slot_names) == set(X.slot_names) | set(Y.slot_names) | set(Z.slot_names)
    assert ((x & y) & z) == (x & (y & z))


@settings(max_examples=1000, deadline=None)
@given(st.data())
def test_projection_composes(data):
    x = data.draw(pooled_states())
    outer = data.draw(st.lists(st.sampled_from(x.record_type.slot_names), min_size=1, unique=True))
    inner = data.draw(st.lists(st.sampled_from(outer), min_size=1, unique=True))
    assert project_type(project_type(x.record_type, outer), inner) == project_type(x.record_type, inner)
    assert project_state(project_state(x, outer), inner) == project_state(x, inner)
