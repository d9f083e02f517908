import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transduce.backend import MockBackend
from transduce.errors import (
    BackendUnavailable,
    CompositionTypeMismatch,
    EmptyCollection,
    InvalidProvenance,
    KernelOutputInvalid,
    TypeMismatch,
    UnsupportedFeature,
)
from transduce.schema_core import INTEGER, RecordType, State, slot
from transduce.transduction import (
    KernelKind,
    ProvenanceMap,
    With,
    compose,
    compose_all,
    identity,
    invoke,
    lift_deterministic,
    lshift,
    make_reducer,
    make_transduction,
    transducible,
    use_backend,
)
from tests.conftest import APPLICANT, NUMBER, RISK, numbers, plus, risk_rule, run, smith, times

PAIR = RecordType("Pair", (slot("a", INTEGER), slot("b", INTEGER)))

STEPS = {
    "swap": (lambda p: {"a": p.b, "b": p.a}, {"a": ["b"], "b": ["a"]}),
    "add": (lambda p: {"a": p.a + p.b, "b": p.b}, {"a": ["a", "b"], "b": ["b"]}),
    "neg": (lambda p: {"a": -p.a, "b": p.b}, {"a": ["a"], "b": ["b"]}),
    "dup": (lambda p: {"a": p.a, "b": p.a}, {"a": ["a"], "b": ["a"]}),
}


def step(name):
    proc, prov = STEPS[name]
    return lift_deterministic(proc, PAIR, PAIR, prov, name=name)


def outcome(f, x):
    result = run(invoke(f, x))
    return result.state, result.provenance


pairs = st.builds(lambda a, b: State(PAIR, a=a, b=b), st.integers(-50, 50), st.integers(-50, 50))
step_names = st.sampled_from(sorted(STEPS))


# ---------- algebraic laws ----------

@settings(max_examples=1000, deadline=None)
@given(step_names, pairs)
def test_identity_laws(name, x):
    f = step(name)
    expected = outcome(f, x)
    assert outcome(compose(f, identity(PAIR)), x) == expected
    assert outcome(compose(identity(PAIR), f), x) == expected


@settings(max_examples=1000, deadline=None)
@given(step_names, step_names, step_names, pairs)
def test_composition_is_associative(n1, n2, n3, x):
    f, g, h = step(n1), step(n2), step(n3)
    assert outcome(compose(h, compose(g, f)), x) == outcome(compose(compose(h, g), f), x)


def test_identity_run_alone_cites_every_slot():
    state, explanation, provenance = run(invoke(identity(PAIR), State(PAIR, a=1, b=2)))
    assert state == State(PAIR, a=1, b=2)
    assert provenance == ProvenanceMap({"a": ["a", "b"], "b": ["a", "b"]})
    assert explanation.confidence == 1.0


def test_composing_identities_gives_identity():
    f = compose(identity(PAIR), identity(PAIR))
    assert f.kind is KernelKind.IDENTITY


def test_compose_all_flattens():
    f = compose_all(step("neg"), step("swap"), step("add"))
    assert f.kind is KernelKind.COMPOSED
    assert [s.name for s in f.stages] == ["add", "swap", "neg"]
    state, prov = outcome(f, State(PAIR, a=1, b=2))
    assert state.as_dict() == {"a": -2, "b": 3}
    assert prov == ProvenanceMap({"a": ["b"], "b": ["a", "b"]})


# ---------- provenance chaining against brute force ----------

@st.composite
def provenance_chains(draw):
    sizes = draw(st.lists(st.integers(min_value=1, max_value=5), min_size=2, max_size=4))
    types = [RecordType(f"R{i}", tuple(slot(f"s{j}", INTEGER) for j in range(n))) for i, n in enumerate(sizes)]
    tables = []
    for a, b in zip(types, types[1:]):
        tables.append({z: draw(st.sets(st.sampled_from(a.slot_names), min_size=1)) for z in b.slot_names})
    return types, tables


def brute_force(types, tables):
    result = {}
    middle = [t.slot_names for t in types[1:-1]]
    for z in types[-1].slot_names:
        hits = set()
        for x in types[0].slot_names:
            for path in itertools.product(*middle):
                chain = (x,) + path + (z,)
                if all(chain[i] in tables[i][chain[i + 1]] for i in range(len(tables))):
                    hits.add(x)
                    break
        result[z] = hits
    return result


@settings(max_examples=10_000, deadline=None)
@given(provenance_chains())
def test_relational_composition_matches_brute_force(chain):
    types, tables = chain
    composed = ProvenanceMap(tables[0])
    for table in tables[1:]:
        composed = ProvenanceMap(table).after(composed)
    assert {z: set(v) for z, v in composed.entries.items()} == brute_force(types, tables)


@settings(max_examples=150, deadline=None)
@given(provenance_chains())
def test_composed_function_provenance_matches_brute_force(chain):
    types, tables = chain
    fs = [
        lift_deterministic(lambda x, t=b: {n: 0 for n in t.slot_names}, a, b, table, name=f"f{i}")
        for i, (a, b, table) in enumerate(zip(types, types[1:], tables))
    ]
    f = compose_all(*reversed(fs))
    x = State(types[0], {n: 0 for n in types[0].slot_names})
    result = run(invoke(f, x))
    assert {z: set(v) for z, v in result.provenance.entries.items()} == brute_force(types, tables)


# ---------- backend-realized functions ----------

def test_explained_call_returns_state_and_explanation():
    decide = lshift(RISK, With(APPLICANT, instructions="Assess credit risk.", explanation=True),
                    MockBackend([risk_rule(0.96)]))
    state, explanation = run(decide(smith()))
    assert state.risk_class == "medium"
    assert set(explanation.as_dict()) == {"explanation", "relevant_source_attributes", "confidence"}
    assert "last_name" not in explanation.relevant_source_attributes
    assert explanation.confidence == 0.96


def test_plain_call_returns_state_only():
    f = make_transduction(RISK, APPLICANT, backend=MockBackend([risk_rule()]))
    state = run(f(smith()))
    assert state.risk_score == 61


def test_backend_bound_by_context():
    f = make_transduction(RISK, APPLICANT)
    with pytest.raises(BackendUnavailable):
        run(invoke(f, smith()))
    with use_backend(MockBackend([risk_rule()])):
        assert run(invoke(f, smith())).state.risk_class == "medium"


def test_tools_are_rejected():
    with pytest.raises(UnsupportedFeature) as e:
        lshift(RISK, With(APPLICANT, tools=("sensor_knowledge_base",)))
    assert e.value.feature == "tools"


def test_composition_type_mismatch():
    f = make_transduction(RISK, APPLICANT)
    with pytest.raises(CompositionTypeMismatch) as e:
        compose(f, f)
    assert (e.value.produced, e.value.expected) == ("Risk", "Applicant")


def test_reducer_cannot_follow_a_pointwise_stage():
    with pytest.raises(CompositionTypeMismatch):
        compose(make_reducer(NUMBER, NUMBER), plus(1))


def test_composed_chain_explanation_and_confidence():
    grade = lift_deterministic(
        lambda r: {"risk_score": r.risk_score, "risk_class": "high" if r.risk_score > 60 else r.risk_class},
        RISK, RISK, {"risk_score": ["risk_score"], "risk_class": ["risk_score", "risk_class"]}, name="grade",
    )
    f = compose(grade, make_transduction(RISK, APPLICANT, backend=MockBackend([risk_rule(0.9)])))
    state, explanation, provenance = run(invoke(f, smith()))
    assert state.risk_class == "high"
    assert explanation.explanation.startswith("[1] debt-to-income")
    assert "\n[2] deterministic procedure grade" in explanation.explanation
    assert explanation.confidence == pytest.approx(0.9)
    assert provenance == ProvenanceMap({
        "risk_score": ["income", "debt"],
        "risk_class": ["income", "debt", "credit_history"],
    })
    assert explanation.relevant_source_attributes == ("income", "debt", "credit_history")


# ---------- deterministic procedures ----------

def test_lift_rejects_unknown_provenance_slot():
    with pytest.raises(InvalidProvenance):
        lift_deterministic(lambda x: x, NUMBER, NUMBER, {"value": ["amount"]})


def test_lift_rejects_empty_evidence():
    with pytest.raises(InvalidProvenance):
        lift_deterministic(lambda x: x, NUMBER, NUMBER, {"value": []})


def test_bad_procedure_output():
    f = lift_deterministic(lambda x: {"value": "seven"}, NUMBER, NUMBER, {"value": ["value"]})
    with pytest.raises(KernelOutputInvalid) as e:
        run(invoke(f, numbers(1)[0]))
    assert isinstance(e.value.cause, TypeMismatch)


def test_transducible_decorator_with_async_procedure():
    @transducible(source=NUMBER, target=NUMBER, provenance={"value": ["value"]}, explanation=True)
    async def double(x):
        """Double the value."""
        return {"value": x.value * 2}

    assert double.config.instructions == "Double the value."
    state, explanation = run(double(numbers(21)[0]))
    assert state.value == 42
    assert explanation.relevant_source_attributes == ("value",)


def test_wrong_input_type():
    with pytest.raises(TypeMismatch) as e:
        run(invoke(plus(1), smith()))
    assert e.value.slot == "$"


def test_reducer_needs_elements():
    f = lift_deterministic(lambda xs: {"value": len(xs)}, NUMBER, NUMBER, {"value": ["value"]},
                           over_collection=True)
    with pytest.raises(EmptyCollection):
        run(invoke(f, []))
    result = run(invoke(f, numbers(4, 5, 6)))
    assert result.state.value == 3
    assert result.element_evidence == {"value": (0, 1, 2)}


def test_list_call_maps_in_order():
    assert [s.value for s in run(times(3)(numbers(1, 2, 3)))] == [3, 6, 9]
