"""
transduction.py
---------------
Transducible functions: typed, explainable, provenance-carrying maps
between record types.

A function is a frozen value holding (source, target, config) plus a kernel:

    BACKEND        realized by a Backend (LLM or mock rule table)
    DETERMINISTIC  a wrapped Python procedure with declared provenance
    IDENTITY       returns its input
    COMPOSED       a flat chain of non-identity stages
    MAP_REDUCE     map + staged reduce over a collection (see mapreduce)

Every invocation goes through ``invoke``, which type-checks the input,
runs the kernel, checks the output contract and writes one trace record.
"""
from __future__ import annotations

import asyncio
import contextlib
import contextvars
import inspect
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Any, Callable, Iterable, Iterator, Optional, Protocol, Sequence, Union

from transduce import trace
from transduce.errors import (
    BackendUnavailable,
    CompositionTypeMismatch,
    EmptyCollection,
    InvalidConfidence,
    InvalidProvenance,
    KernelOutputInvalid,
    TypeMismatch,
    UnsupportedFeature,
    ValidationFailure,
)
from transduce.schema_core import RecordType, State, validate
from transduce.settings import TransductionConfig

logger = logging.getLogger(__name__)

Payload = Union[State, Sequence[State]]


# ============================================================
#  Explanation / provenance
# ============================================================

@dataclass(frozen=True)
class Explanation:
    explanation: str
    relevant_source_attributes: tuple[str, ...]
    confidence: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "relevant_source_attributes", tuple(self.relevant_source_attributes))

    def check(self, source: RecordType) -> None:
        attrs = self.relevant_source_attributes
        if source.slots and not attrs:
            raise InvalidProvenance("relevant_source_attributes is empty")
        unknown = [a for a in attrs if a not in source]
        if unknown:
            raise InvalidProvenance(f"relevant_source_attributes names unknown slot {unknown[0]!r}")
        if isinstance(self.confidence, bool) or not 0.0 <= self.confidence <= 1.0:
            raise InvalidConfidence(self.confidence)

    def as_dict(self) -> dict[str, Any]:
        return {
            "explanation": self.explanation,
            "relevant_source_attributes": list(self.relevant_source_attributes),
            "confidence": self.confidence,
        }


class ProvenanceMap:
    """Output slot -> non-empty frozenset of input slots."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, Iterable[str]] | None = None):
        self._entries = MappingProxyType({k: frozenset(v) for k, v in (entries or {}).items()})

    @classmethod
    def full(cls, source: RecordType, target: RecordType) -> "ProvenanceMap":
        everything = frozenset(source.slot_names)
        return cls({name: everything for name in target.slot_names})

    @property
    def entries(self) -> Mapping[str, frozenset[str]]:
        return self._entries

    def __getitem__(self, slot_name: str) -> frozenset[str]:
        return self._entries[slot_name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProvenanceMap):
            return NotImplemented
        return dict(self._entries) == dict(other._entries)

    def __hash__(self) -> int:
        return hash(frozenset(self._entries.items()))

    def __repr__(self) -> str:
        return f"ProvenanceMap({self.as_dict()})"

    def after(self, first: "ProvenanceMap") -> "ProvenanceMap":
        """Relational composition: self's inputs are ``first``'s outputs."""
        return ProvenanceMap({
            z: frozenset().union(*(first._entries.get(y, frozenset()) for y in ys))
            for z, ys in self._entries.items()
        })

    def check(self, source: RecordType, target: RecordType) -> None:
        for name in self._entries:
            if name not in target:
                raise InvalidProvenance(f"entry for {name!r}, which is not a slot of {target.name}")
        for name in target.slot_names:
            evidence = self._entries.get(name, frozenset())
            if not evidence and source.slots:
                raise InvalidProvenance(f"slot {name!r} has no evidence")
            unknown = sorted(e for e in evidence if e not in source)
            if unknown:
                raise InvalidProvenance(f"slot {name!r} cites {unknown[0]!r}, not a slot of {source.name}")

    def as_dict(self) -> dict[str, list[str]]:
        return {k: sorted(v) for k, v in self._entries.items()}


@dataclass(frozen=True)
class Transduction:
    """Result of one invocation. Unpacks as ``state, explanation, provenance``."""

    state: State
    explanation: Explanation
    provenance: ProvenanceMap
    element_evidence: Optional[Mapping[str, tuple[int, ...]]] = None
    retries: int = 0
    record_id: Optional[int] = None

    def __iter__(self) -> Iterator[Any]:
        yield self.state
        yield self.explanation
        yield self.provenance


# ============================================================
#  Functions
# ============================================================

class KernelKind(str, Enum):
    BACKEND = "backend"
    DETERMINISTIC = "deterministic"
    IDENTITY = "identity"
    COMPOSED = "composed"
    MAP_REDUCE = "map_reduce"


class Backend(Protocol):
    model_name: Optional[str]

    async def run(self, spec: "TransducibleFunction", payload: Payload) -> Transduction: ...


_backend_var: contextvars.ContextVar[Optional[Backend]] = contextvars.ContextVar("transduce_backend", default=None)


@contextlib.contextmanager
def use_backend(backend: Backend):
    """Bind the backend used by functions constructed without one."""
    token = _backend_var.set(backend)
    try:
        yield backend
    finally:
        _backend_var.reset(token)


def current_backend() -> Optional[Backend]:
    return _backend_var.get()


@dataclass(frozen=True, eq=False)
class TransducibleFunction:
    source: RecordType
    target: RecordType
    config: TransductionConfig = field(default_factory=TransductionConfig)
    kind: KernelKind = KernelKind.BACKEND
    name: str = ""
    backend: Optional[Backend] = None
    procedure: Optional[Callable[..., Any]] = None
    declared_provenance: Optional[ProvenanceMap] = None
    stages: tuple["TransducibleFunction", ...] = ()
    over_collection: bool = False
    policy: Any = None
    combiner: Optional["TransducibleFunction"] = None

    @property
    def label(self) -> str:
        shape = f"list of {self.source.name}" if self.over_collection else self.source.name
        return self.name or f"{self.target.name} << {shape}"

    def with_backend(self, backend: Backend) -> "TransducibleFunction":
        return replace(self, backend=backend)

    async def __call__(self, x: Payload) -> Any:
        if isinstance(x, (list, tuple)) and not self.over_collection:
            from transduce.mapreduce import map_states
            mapped = await map_states(self, list(x))
            return [self._present(r) for r in mapped.raise_first()]
        return self._present(await invoke(self, x))

    def _present(self, result: Transduction) -> Any:
        if self.config.explanation_requested:
            return result.state, result.explanation
        return result.state

    def __repr__(self) -> str:
        return f"TransducibleFunction({self.label}, kind={self.kind.value})"


def make_transduction(target: RecordType, source: RecordType, config: TransductionConfig | None = None,
                      backend: Backend | None = None, name: str = "") -> TransducibleFunction:
    config = config or TransductionConfig()
    if config.tools:
        raise UnsupportedFeature("tools")
    return TransducibleFunction(source, target, config, KernelKind.BACKEND, name=name, backend=backend)


def make_reducer(target: RecordType, element: RecordType, config: TransductionConfig | None = None,
                 backend: Backend | None = None, name: str = "") -> TransducibleFunction:
    """Backend function over a list of ``element`` states (``target << element^N``)."""
    return replace(make_transduction(target, element, config, backend, name), over_collection=True)


def identity(record_type: RecordType) -> TransducibleFunction:
    return TransducibleFunction(record_type, record_type, kind=KernelKind.IDENTITY, name=f"identity({record_type.name})")


def _stages(f: TransducibleFunction) -> tuple[TransducibleFunction, ...]:
    return f.stages if f.kind is KernelKind.COMPOSED else (f,)


def compose(f2: TransducibleFunction, f1: TransducibleFunction) -> TransducibleFunction:
    """``f2 . f1``: run f1, feed its state to f2. Identities are absorbed."""
    if f1.target != f2.source:
        raise CompositionTypeMismatch(f1.target.name, f2.source.name)
    if f2.over_collection:
        raise CompositionTypeMismatch(f1.target.name, f"list of {f2.source.name}")
    stages = tuple(s for s in _stages(f1) + _stages(f2) if s.kind is not KernelKind.IDENTITY)
    if not stages:
        return identity(f1.source)
    if len(stages) == 1:
        return stages[0]
    return TransducibleFunction(
        source=stages[0].source,
        target=stages[-1].target,
        config=stages[-1].config,
        kind=KernelKind.COMPOSED,
        name=" . ".join(s.label for s in reversed(stages)),
        stages=stages,
        over_collection=stages[0].over_collection,
    )


def compose_all(*fs: TransducibleFunction) -> TransducibleFunction:
    """compose_all(f3, f2, f1) == compose(f3, compose(f2, f1))."""
    if not fs:
        raise ValueError("compose_all needs at least one function")
    result = fs[-1]
    for f in reversed(fs[:-1]):
        result = compose(f, result)
    return result


def lift_deterministic(proc: Callable[..., Any], source: RecordType, target: RecordType,
                       declared_provenance: ProvenanceMap | Mapping[str, Iterable[str]],
                       name: str | None = None, config: TransductionConfig | None = None,
                       over_collection: bool = False) -> TransducibleFunction:
    """Wrap a (sync or async) procedure ``source -> target`` as a transducible function."""
    if not isinstance(declared_provenance, ProvenanceMap):
        declared_provenance = ProvenanceMap(declared_provenance)
    declared_provenance.check(source, target)
    return TransducibleFunction(
        source, target, config or TransductionConfig(), KernelKind.DETERMINISTIC,
        name=name or getattr(proc, "__name__", "procedure"),
        procedure=proc, declared_provenance=declared_provenance,
        over_collection=over_collection,
    )


def transducible(source: RecordType, target: RecordType,
                 provenance: Mapping[str, Iterable[str]] | None = None,
                 explanation: bool = False, over_collection: bool = False):
    """Decorator form of lift_deterministic; the docstring becomes the instructions."""

    def wrap(proc: Callable[..., Any]) -> TransducibleFunction:
        declared = ProvenanceMap(provenance) if provenance is not None else ProvenanceMap.full(source, target)
        config = TransductionConfig(instructions=inspect.getdoc(proc) or "", explanation_requested=explanation)
        return lift_deterministic(proc, source, target, declared, config=config, over_collection=over_collection)

    return wrap


@dataclass(frozen=True)
class With:
    """Source type plus per-function parameters, for ``Target << With(Source, ...)``."""

    source: RecordType
    instructions: str = ""
    model: Optional[str] = None
    temperature: float = 0.0
    explanation: bool = False
    max_retries: Optional[int] = None
    tools: tuple[str, ...] = ()

    def to_config(self) -> TransductionConfig:
        from transduce.settings import build
        return build(
            TransductionConfig,
            instructions=self.instructions,
            model=self.model,
            temperature=self.temperature,
            explanation_requested=self.explanation,
            max_retries=self.max_retries,
            tools=tuple(self.tools),
        )


def lshift(target: RecordType, source: RecordType | With, backend: Backend | None = None) -> TransducibleFunction:
    if isinstance(source, With):
        return make_transduction(target, source.source, source.to_config(), backend)
    return make_transduction(target, source, None, backend)


# ============================================================
#  Invocation
# ============================================================

def _kind_of(x: Any) -> str:
    return f"record {x.record_type.name}" if isinstance(x, State) else type(x).__name__


def _check_input(f: TransducibleFunction, x: Any) -> None:
    expected = f"record {f.source.name}"
    if not f.over_collection:
        if not isinstance(x, State) or x.record_type != f.source:
            raise TypeMismatch("$", expected, _kind_of(x))
        return
    if not isinstance(x, (list, tuple)):
        raise TypeMismatch("$", f"list of {expected}", _kind_of(x))
    if not x:
        raise EmptyCollection()
    for i, item in enumerate(x):
        if not isinstance(item, State) or item.record_type != f.source:
            raise TypeMismatch(f"[{i}]", expected, _kind_of(item))


def check_contract(f: TransducibleFunction, result: Transduction) -> Transduction:
    """Typed output, provenance soundness and confidence range."""
    validate(result.state, f.target)
    result.provenance.check(f.source, f.target)
    result.explanation.check(f.source)
    return result


def _ordered(names: Iterable[str], source: RecordType) -> tuple[str, ...]:
    wanted = set(names)
    return tuple(n for n in source.slot_names if n in wanted)


def _all_indices(target: RecordType, n: int) -> dict[str, tuple[int, ...]]:
    return {name: tuple(range(n)) for name in target.slot_names}


async def _run_identity(f: TransducibleFunction, x: State) -> Transduction:
    return Transduction(
        x,
        Explanation("identity: input returned unchanged", f.source.slot_names, 1.0),
        ProvenanceMap.full(f.source, f.target),
    )


async def _run_deterministic(f: TransducibleFunction, x: Payload) -> Transduction:
    out = f.procedure(list(x) if f.over_collection else x)
    if inspect.isawaitable(out):
        out = await out
    try:
        state = validate(out, f.target)
    except ValidationFailure as e:
        raise KernelOutputInvalid(e) from e
    prov = f.declared_provenance
    relevant = _ordered(set().union(*prov.entries.values()), f.source)
    return Transduction(state, Explanation(f"deterministic procedure {f.name}", relevant, 1.0), prov)


async def _run_backend(f: TransducibleFunction, x: Payload) -> Transduction:
    backend = f.backend or current_backend()
    if backend is None:
        raise BackendUnavailable(f"no backend bound for {f.label}")
    return await backend.run(f, x)


def fold_chain(f: TransducibleFunction, results: Sequence[Transduction]) -> Transduction:
    """Combine stage results: relational provenance, labeled explanations, product confidence."""
    chain = results[0].provenance
    relevant = set(results[0].explanation.relevant_source_attributes)
    evidence = results[0].element_evidence
    confidence = results[0].explanation.confidence
    for r in results[1:]:
        relevant = set().union(*(chain.entries.get(y, frozenset()) for y in r.explanation.relevant_source_attributes))
        if evidence is not None:
            evidence = {
                z: tuple(sorted(set().union(*(evidence.get(y, ()) for y in ys))))
                for z, ys in r.provenance.entries.items()
            }
        chain = r.provenance.after(chain)
        confidence *= r.explanation.confidence
    text = "\n".join(f"[{i}] {r.explanation.explanation}" for i, r in enumerate(results, 1))
    return Transduction(
        results[-1].state,
        Explanation(text, _ordered(relevant, f.source), min(1.0, max(0.0, confidence))),
        chain,
        element_evidence=evidence,
        retries=sum(r.retries for r in results),
    )


async def _run_composed(f: TransducibleFunction, x: Payload, record_id: int) -> Transduction:
    sink = trace.current_sink()
    ids = [sink.reserve_id() for _ in f.stages]
    results: list[Transduction] = []
    current: Payload = x
    upstream: tuple[int, ...] = ()
    for stage, sid in zip(f.stages, ids):
        r = await invoke(stage, current, record_id=sid, parent_id=record_id, upstream=upstream)
        results.append(r)
        current, upstream = r.state, (sid,)
    return fold_chain(f, results)


async def _run_kernel(f: TransducibleFunction, x: Payload, record_id: int) -> Transduction:
    if f.kind is KernelKind.IDENTITY:
        return await _run_identity(f, x)
    if f.kind is KernelKind.DETERMINISTIC:
        return await _run_deterministic(f, x)
    if f.kind is KernelKind.COMPOSED:
        return await _run_composed(f, x, record_id)
    if f.kind is KernelKind.MAP_REDUCE:
        from transduce.mapreduce import run_map_reduce
        mapper, reducer = f.stages
        return await run_map_reduce(mapper, reducer, list(x), f.policy, f.combiner)
    return await _run_backend(f, x)


def _model_of(f: TransducibleFunction) -> Optional[str]:
    if f.kind is not KernelKind.BACKEND:
        return None
    backend = f.backend or current_backend()
    return f.config.model or getattr(backend, "model_name", None)


async def invoke(f: TransducibleFunction, x: Payload, *, record_id: int | None = None,
                 parent_id: Any = trace.INHERIT,
                 upstream: Sequence[int] = ()) -> Transduction:
    """Run ``f`` on ``x``; returns a checked Transduction and records it to the trace."""
    _check_input(f, x)
    sink = trace.current_sink()
    span = trace.open_span(
        sink,
        record_id=record_id,
        parent_id=trace.current_parent() if parent_id is trace.INHERIT else parent_id,
        kind=f.kind.value,
        source=f.source.name,
        target=f.target.name,
        model=_model_of(f),
        instructions=f.config.instructions,
        payload=x,
        upstream=upstream,
    )
    logger.debug("invoke #%d %s", span.record_id, f.label)
    try:
        with trace.parent_scope(span.record_id):
            result = await _run_kernel(f, x, span.record_id)
        if f.over_collection and result.element_evidence is None:
            result = replace(result, element_evidence=_all_indices(f.target, len(x)))
        check_contract(f, result)
    except asyncio.CancelledError:
        span.cancelled()
        raise
    except Exception as e:
        span.failed(e)
        raise
    span.succeeded(result)
    return replace(result, record_id=span.record_id)
