"""
mapreduce.py
------------
Collection execution: order-preserving bounded-concurrency map, staged
batched reduce, map-reduce and per-group reduce.

Staged reduce plan for N elements and batch size B: contiguous batches of
at most B, each reduced to a partial; the partials are batched again until
one call covers everything. N=10, B=3 gives 4 -> 2 -> 1 calls.

Trace ids for a whole map or reduce are reserved before the first call
starts, top level first, so ids do not depend on completion order.
"""
from __future__ import annotations

import asyncio
import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Awaitable, Callable, Mapping, Optional, Sequence, Union

from transduce import trace
from transduce.errors import (
    CompositionTypeMismatch,
    ElementError,
    EmptyCollection,
    StagingTypeMismatch,
    TypeMismatch,
)
from transduce.schema_core import RecordType, State
from transduce.settings import ExecutionPolicy
from transduce.transduction import (
    Explanation,
    KernelKind,
    ProvenanceMap,
    Transduction,
    TransducibleFunction,
    invoke,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ElementFailure:
    index: int
    error: Exception


Outcome = Union[Transduction, ElementFailure]


@dataclass
class MapResult:
    outputs: list[Outcome] = field(default_factory=list)
    record_id: Optional[int] = None

    def __len__(self) -> int:
        return len(self.outputs)

    def __getitem__(self, i: int) -> Outcome:
        return self.outputs[i]

    def __iter__(self):
        return iter(self.outputs)

    @property
    def ok(self) -> bool:
        return not self.errors()

    def successes(self) -> list[Transduction]:
        return [o for o in self.outputs if isinstance(o, Transduction)]

    def states(self) -> list[State]:
        return [o.state for o in self.successes()]

    def record_ids(self) -> list[Optional[int]]:
        return [o.record_id for o in self.successes()]

    def errors(self) -> list[ElementFailure]:
        return [o for o in self.outputs if isinstance(o, ElementFailure)]

    def raise_first(self) -> list[Transduction]:
        errors = self.errors()
        if errors:
            raise ElementError(errors[0].index, errors[0].error)
        return self.successes()


# ============================================================
#  Bounded execution
# ============================================================

Call = Callable[[], Awaitable[Transduction]]


def _record_never_started(sink: trace.TraceSink, stubs: Sequence[tuple[int, dict[str, Any]]]) -> None:
    for record_id, span_args in stubs:
        if not sink.has(record_id):
            trace.open_span(sink, record_id=record_id, **span_args).cancelled()


async def _run_bounded(calls: Sequence[Call], policy: ExecutionPolicy,
                       semaphore: asyncio.Semaphore | None = None) -> list[Union[Transduction, Exception]]:
    """Run calls with at most ``max_concurrency`` in flight; results in call order.

    collect: exceptions take their call's slot. fail_fast: the first failure
    cancels everything pending and is raised as ElementError.
    """
    sem = semaphore or asyncio.Semaphore(policy.max_concurrency)
    stop = asyncio.Event()
    fail_fast = policy.failure_mode == "fail_fast"

    async def one(call: Call) -> Transduction:
        async with sem:
            if stop.is_set():
                raise asyncio.CancelledError()
            try:
                return await call()
            except Exception:
                if fail_fast:
                    stop.set()
                raise

    tasks = [asyncio.create_task(one(c)) for c in calls]
    try:
        if policy.failure_mode == "collect":
            results = await asyncio.gather(*tasks, return_exceptions=True)
            for r in results:
                if isinstance(r, BaseException) and not isinstance(r, Exception):
                    raise r
            return list(results)

        pending = set(tasks)
        while pending:
            done, pending = await asyncio.wait(pending, return_when=asyncio.FIRST_EXCEPTION)
            failed = [i for i, t in enumerate(tasks) if t in done and not t.cancelled() and t.exception()]
            if failed:
                for t in pending:
                    t.cancel()
                await asyncio.gather(*pending, return_exceptions=True)
                first = failed[0]
                raise ElementError(first, tasks[first].exception())
        return [t.result() for t in tasks]
    except asyncio.CancelledError:
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise


def _check_elements(element: RecordType, xs: Sequence[Any]) -> None:
    for i, x in enumerate(xs):
        if not isinstance(x, State) or x.record_type != element:
            found = f"record {x.record_type.name}" if isinstance(x, State) else type(x).__name__
            raise TypeMismatch(f"[{i}]", f"record {element.name}", found)


def _upstream_of(upstream: Optional[Sequence[Optional[int]]], start: int, end: int) -> tuple[int, ...]:
    if not upstream:
        return ()
    return tuple(u for u in upstream[start:end] if u is not None)


# ============================================================
#  Map
# ============================================================

async def map_states(f: TransducibleFunction, xs: Sequence[State], policy: ExecutionPolicy | None = None,
                     upstream: Optional[Sequence[Optional[int]]] = None) -> MapResult:
    """Apply ``f`` to every element; output i belongs to input i."""
    policy = policy or ExecutionPolicy()
    xs = list(xs)
    if not xs:
        return MapResult([])
    sink = trace.current_sink()
    envelope = trace.open_span(
        sink, kind="map", source=f.source.name, target=f.target.name, payload=xs,
        parent_id=trace.current_parent(), upstream=_upstream_of(upstream, 0, len(xs)),
    )
    ids = [sink.reserve_id() for _ in xs]
    calls = [
        functools.partial(invoke, f, x, record_id=rid, parent_id=envelope.record_id,
                          upstream=_upstream_of(upstream, i, i + 1))
        for i, (x, rid) in enumerate(zip(xs, ids))
    ]
    logger.debug("map %s over %d elements", f.label, len(xs))
    try:
        results = await _run_bounded(calls, policy)
    except (ElementError, asyncio.CancelledError) as e:
        stub = dict(kind=f.kind.value, source=f.source.name, target=f.target.name, parent_id=envelope.record_id)
        _record_never_started(sink, [(rid, {**stub, "payload": x}) for x, rid in zip(xs, ids)])
        if isinstance(e, asyncio.CancelledError):
            envelope.cancelled()
        else:
            envelope.closed_with(None, {"count": len(xs)}, status=trace.STATUS_ERROR, error=str(e))
        raise

    outputs: list[Outcome] = [
        r if isinstance(r, Transduction) else ElementFailure(i, r) for i, r in enumerate(results)
    ]
    failures = sum(1 for o in outputs if isinstance(o, ElementFailure))
    if failures:
        logger.warning("[!] map %s: %d of %d elements failed", f.label, failures, len(xs))
    envelope.closed_with(
        [o.state if isinstance(o, Transduction) else None for o in outputs],
        {"count": len(xs), "failures": failures},
    )
    return MapResult(outputs, envelope.record_id)


# ============================================================
#  Reduce
# ============================================================

def plan_batches(n: int, batch_size: int) -> list[list[tuple[int, int]]]:
    """Half-open index ranges per level; level k ranges index level k-1's partials."""
    if n < 1:
        raise EmptyCollection()
    levels = []
    count = n
    while True:
        level = [(s, min(s + batch_size, count)) for s in range(0, count, batch_size)]
        levels.append(level)
        if len(level) == 1:
            return levels
        count = len(level)


def _staging_function(r: TransducibleFunction, combiner: TransducibleFunction | None) -> TransducibleFunction:
    if combiner is not None:
        if combiner.source != r.target or combiner.target != r.target or not combiner.over_collection:
            raise StagingTypeMismatch(combiner.source.name, r.target.name)
        return combiner
    if r.source != r.target:
        raise StagingTypeMismatch(r.source.name, r.target.name)
    return r


def _union(maps: Sequence[ProvenanceMap]) -> ProvenanceMap:
    merged: dict[str, set[str]] = {}
    for m in maps:
        for k, v in m.entries.items():
            merged.setdefault(k, set()).update(v)
    return ProvenanceMap(merged)


def _parent_index(levels: list[list[tuple[int, int]]], k: int, j: int) -> int:
    for m, (s, e) in enumerate(levels[k + 1]):
        if s <= j < e:
            return m
    raise IndexError(j)


def _combine_tree(r: TransducibleFunction, levels: list[list[tuple[int, int]]],
                  results: list[list[Transduction]]) -> Transduction:
    closures: list[list[ProvenanceMap]] = []
    evidence: list[list[dict[str, tuple[int, ...]]]] = []
    for k, level in enumerate(levels):
        level_closures, level_evidence = [], []
        for j, (s, e) in enumerate(level):
            res = results[k][j]
            local = res.element_evidence or {z: tuple(range(e - s)) for z in res.provenance}
            if k == 0:
                level_closures.append(res.provenance)
                level_evidence.append({z: tuple(s + i for i in idx) for z, idx in local.items()})
                continue
            below = closures[k - 1][s:e]
            level_closures.append(res.provenance.after(_union(below)))
            ev = {}
            for z, idx in local.items():
                hits: set[int] = set()
                for i in idx:
                    partial = evidence[k - 1][s + i]
                    for y in res.provenance.entries.get(z, ()):
                        hits.update(partial.get(y, ()))
                ev[z] = tuple(sorted(hits))
            level_evidence.append(ev)
        closures.append(level_closures)
        evidence.append(level_evidence)

    relevant: set[str] = set()
    confidence = 1.0
    texts = []
    for k, level in enumerate(levels):
        for j, res in enumerate(results[k]):
            if k == 0:
                relevant.update(res.explanation.relevant_source_attributes)
            confidence *= res.explanation.confidence
            label = f"[stage {k + 1}.{j + 1}]" if len(levels) > 1 else "[reduce]"
            texts.append(f"{label} {res.explanation.explanation}")
    top = results[-1][0]
    return Transduction(
        top.state,
        Explanation("\n".join(texts), tuple(n for n in r.source.slot_names if n in relevant),
                    min(1.0, max(0.0, confidence))),
        closures[-1][0],
        element_evidence=evidence[-1][0],
        retries=sum(res.retries for level in results for res in level),
    )


def _default_policy(r: TransducibleFunction) -> ExecutionPolicy:
    return ExecutionPolicy(batch_size=r.config.batch_size)


async def reduce_states(r: TransducibleFunction, xs: Sequence[State], policy: ExecutionPolicy | None = None,
                        combiner: TransducibleFunction | None = None,
                        upstream: Optional[Sequence[Optional[int]]] = None,
                        semaphore: asyncio.Semaphore | None = None) -> Transduction:
    """Reduce ``xs`` with the collection-level function ``r``, staging when |xs| > batch_size."""
    policy = policy or _default_policy(r)
    xs = list(xs)
    if not xs:
        raise EmptyCollection()
    if not r.over_collection:
        raise CompositionTypeMismatch(f"list of {r.source.name}", f"{r.source.name} (not a reducer)")
    _check_elements(r.source, xs)
    levels = plan_batches(len(xs), policy.batch_size)
    stage_fn = _staging_function(r, combiner) if len(levels) > 1 else r

    sink = trace.current_sink()
    envelope = trace.open_span(
        sink, kind="reduce", source=r.source.name, target=r.target.name, payload=xs,
        parent_id=trace.current_parent(), upstream=_upstream_of(upstream, 0, len(xs)),
    )
    ids: list[list[int]] = [[] for _ in levels]
    for k in reversed(range(len(levels))):
        ids[k] = [sink.reserve_id() for _ in levels[k]]

    inputs: list[State] = xs
    input_ids: Optional[Sequence[Optional[int]]] = upstream
    results: list[list[Transduction]] = []
    try:
        for k, level in enumerate(levels):
            fn = r if k == 0 else stage_fn
            calls = []
            for j, (s, e) in enumerate(level):
                parent = envelope.record_id if k == len(levels) - 1 else ids[k + 1][_parent_index(levels, k, j)]
                calls.append(functools.partial(
                    invoke, fn, inputs[s:e], record_id=ids[k][j], parent_id=parent,
                    upstream=_upstream_of(input_ids, s, e),
                ))
            outcome = await _run_bounded(calls, policy, semaphore)
            for j, res in enumerate(outcome):
                if not isinstance(res, Transduction):
                    raise ElementError(j, res)
            results.append(outcome)
            inputs = [res.state for res in outcome]
            input_ids = [res.record_id for res in outcome]
    except (ElementError, asyncio.CancelledError) as e:
        stubs = []
        for k, level in enumerate(levels):
            fn = r if k == 0 else stage_fn
            for j, rid in enumerate(ids[k]):
                parent = envelope.record_id if k == len(levels) - 1 else ids[k + 1][_parent_index(levels, k, j)]
                stubs.append((rid, dict(kind=fn.kind.value, source=fn.source.name, target=fn.target.name,
                                        parent_id=parent, payload=None)))
        _record_never_started(sink, stubs)
        if isinstance(e, asyncio.CancelledError):
            envelope.cancelled()
        else:
            envelope.failed(e)
        raise

    combined = _combine_tree(r, levels, results)
    envelope.succeeded(combined, {
        "batch_size": policy.batch_size,
        "levels": [len(level) for level in levels],
        "batches": [[list(b) for b in level] for level in levels],
    })
    return replace(combined, record_id=envelope.record_id)


# ============================================================
#  Map-reduce
# ============================================================

def as_transducible(f: TransducibleFunction, r: TransducibleFunction, policy: ExecutionPolicy | None = None,
                    combiner: TransducibleFunction | None = None) -> TransducibleFunction:
    """``r . map(f)`` as one collection-level function."""
    if f.over_collection:
        raise CompositionTypeMismatch(f"list of {f.source.name}", f.source.name)
    if not r.over_collection or f.target != r.source:
        raise CompositionTypeMismatch(f.target.name, r.source.name)
    return TransducibleFunction(
        source=f.source,
        target=r.target,
        config=r.config,
        kind=KernelKind.MAP_REDUCE,
        name=f"{r.label} . map({f.label})",
        stages=(f, r),
        over_collection=True,
        policy=policy,
        combiner=combiner,
    )


async def run_map_reduce(f: TransducibleFunction, r: TransducibleFunction, xs: Sequence[State],
                         policy: ExecutionPolicy | None = None,
                         combiner: TransducibleFunction | None = None) -> Transduction:
    policy = policy or _default_policy(r)
    mapped = await map_states(f, xs, policy)
    mapped.raise_first()
    reduced = await reduce_states(r, mapped.states(), policy, combiner, upstream=mapped.record_ids())

    per_element = _union([m.provenance for m in mapped.successes()])
    relevant = set().union(*(per_element.entries.get(y, frozenset())
                             for y in reduced.explanation.relevant_source_attributes))
    map_confidence = min(m.explanation.confidence for m in mapped.successes())
    return Transduction(
        reduced.state,
        Explanation(
            f"[map] {len(xs)} elements through {f.label}\n{reduced.explanation.explanation}",
            tuple(n for n in f.source.slot_names if n in relevant),
            reduced.explanation.confidence * map_confidence,
        ),
        reduced.provenance.after(per_element),
        element_evidence=reduced.element_evidence,
        retries=reduced.retries + sum(m.retries for m in mapped.successes()),
    )


async def map_reduce(f: TransducibleFunction, r: TransducibleFunction, xs: Sequence[State],
                     policy: ExecutionPolicy | None = None,
                     combiner: TransducibleFunction | None = None) -> Transduction:
    return await invoke(as_transducible(f, r, policy, combiner), list(xs))


async def reduce_per_group(r: TransducibleFunction, groups: Mapping[str, Sequence[State]] | Sequence[tuple[str, Sequence[State]]],
                           policy: ExecutionPolicy | None = None, combiner: TransducibleFunction | None = None,
                           upstream: Mapping[str, Sequence[Optional[int]]] | None = None) -> MapResult:
    """Reduce each named group independently; one outcome per group, in group order."""
    policy = policy or _default_policy(r)
    items = list(groups.items()) if isinstance(groups, Mapping) else list(groups)
    shared = asyncio.Semaphore(policy.max_concurrency)
    calls = [
        functools.partial(reduce_states, r, states, policy, combiner,
                          (upstream or {}).get(name), shared)
        for name, states in items
    ]
    # group reduces share one semaphore, so they are launched unbounded here
    unbounded = policy.model_copy(update={"max_concurrency": max(1, len(calls))})
    results = await _run_bounded(calls, unbounded)
    return MapResult([r if isinstance(r, Transduction) else ElementFailure(i, r) for i, r in enumerate(results)])
