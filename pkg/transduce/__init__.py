"""Typed LLM transductions: record types, transducible functions, map-reduce and provenance traces."""
from transduce.errors import TransduceError
from transduce.mapreduce import map_reduce, map_states, reduce_per_group, reduce_states
from transduce.schema_core import (
    BOOLEAN,
    INTEGER,
    REAL,
    TEXT,
    RecordType,
    State,
    define_record,
    json_schema_of,
    list_of,
    record,
    slot,
    validate,
)
from transduce.settings import BackendConfig, ExecutionPolicy, TransductionConfig
from transduce.trace import lineage, tracing
from transduce.transduction import (
    Explanation,
    ProvenanceMap,
    TransducibleFunction,
    Transduction,
    With,
    compose,
    identity,
    invoke,
    lift_deterministic,
    lshift,
    make_reducer,
    make_transduction,
    transducible,
    use_backend,
)
