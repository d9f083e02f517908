"""
runner.py
---------
Runs one compiled workflow end to end:
  1) prepare the run directory (default: data/runs/<ts>_<workflow>)
  2) execute the stages under a JSONL trace sink and the chosen backend
  3) write outputs.json (or outputs.partial.json), trace.jsonl,
     run_summary.json and update metadata.json
"""
from __future__ import annotations

import asyncio
import datetime
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from transduce import trace
from transduce.backend import backend_from_env
from transduce.common import (
    cleanup_unsaved_runs,
    create_run_dir,
    init_run_dir,
    update_metadata,
    write_json_atomic,
)
from transduce.errors import ConfigError, ElementError, TransduceError
from transduce.mapreduce import map_states, reduce_per_group, reduce_states
from transduce.mock_rules import mock_backend_from_file
from transduce.run_summary import build_run_summary, save_run_summary
from transduce.schema_core import State
from transduce.settings import BackendConfig, ExecutionPolicy, build
from transduce.transduction import Backend, Transduction, use_backend
from transduce.workflow import CompiledStage, CompiledWorkflow

logger = logging.getLogger(__name__)

OUTPUTS_FILE = "outputs.json"
PARTIAL_OUTPUTS_FILE = "outputs.partial.json"
TRACE_FILE = "trace.jsonl"
SUMMARY_FILE = "run_summary.json"


@dataclass
class StageReport:
    index: int
    kind: str
    label: str
    function: str
    input_count: int = 0
    output_count: int = 0
    failures: int = 0
    record_ids: list[int] = field(default_factory=list)
    duration_s: float = 0.0


@dataclass
class RunOutcome:
    run_dir: str
    outputs: list[State]
    final_record_ids: list[int]
    stages: list[StageReport]
    errors: list[str]
    outputs_path: str
    trace_path: str
    summary_path: str

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass
class _Group:
    """States of one data source as they move through the stages."""
    name: str
    states: list[State]
    record_ids: list[Optional[int]]


def make_backend(kind: str, compiled: CompiledWorkflow, rules_path: Optional[str] = None,
                 model: Optional[str] = None, base_url: Optional[str] = None) -> Backend:
    """Build the backend before any work starts; a missing key or rules file fails here."""
    if kind == "mock":
        path = rules_path or compiled.rules_path
        if not path:
            raise ConfigError("the mock backend needs a rules file (--rules or mock_rules in the workflow)",
                              field="rules")
        return mock_backend_from_file(path)
    if kind == "http":
        return backend_from_env(build(BackendConfig, endpoint=base_url, model=model))
    raise ConfigError(f"unknown backend {kind!r}", field="backend")


def _element_error(stage: int, label: str, group: str, index: int, error: BaseException) -> str:
    return f"stage {stage} ({label}), source {group}, element {index}: {type(error).__name__}: {error}"


async def _run_pointwise(i: int, stage: CompiledStage, groups: list[_Group], policy: ExecutionPolicy,
                         report: StageReport, errors: list[str]) -> list[_Group]:
    out = []
    for g in groups:
        if not g.states:
            out.append(g)
            continue
        res = await map_states(stage.function, g.states, policy, upstream=g.record_ids)
        for failure in res.errors():
            errors.append(_element_error(i, stage.label, g.name, failure.index, failure.error))
        report.failures += len(res.errors())
        if res.record_id is not None:
            report.record_ids.append(res.record_id)
        out.append(_Group(g.name, res.states(), res.record_ids()))
    return out


async def _run_reduce(i: int, stage: CompiledStage, groups: list[_Group], policy: ExecutionPolicy,
                      report: StageReport, errors: list[str]) -> list[_Group]:
    live = [g for g in groups if g.states]
    for g in groups:
        if not g.states:
            errors.append(f"stage {i} ({stage.label}), source {g.name}: nothing left to reduce")
            report.failures += 1

    if stage.per_source:
        res = await reduce_per_group(
            stage.function, [(g.name, g.states) for g in live], policy, stage.combiner,
            upstream={g.name: g.record_ids for g in live},
        )
        out = []
        for g, outcome in zip(live, res):
            if isinstance(outcome, Transduction):
                report.record_ids.append(outcome.record_id)
                out.append(_Group(g.name, [outcome.state], [outcome.record_id]))
            else:
                errors.append(_element_error(i, stage.label, g.name, outcome.index, outcome.error))
                report.failures += 1
        if res.errors() and policy.failure_mode == "fail_fast":
            first = res.errors()[0]
            raise ElementError(first.index, first.error)
        return out

    states = [s for g in live for s in g.states]
    ids = [rid for g in live for rid in g.record_ids]
    if not states:
        return []
    result = await reduce_states(stage.function, states, policy, stage.combiner, upstream=ids)
    report.record_ids.append(result.record_id)
    return [_Group("all", [result.state], [result.record_id])]


async def execute(compiled: CompiledWorkflow, policy: ExecutionPolicy,
                  reports: list[StageReport], errors: list[str]) -> list[_Group]:
    groups = [_Group(src.name, list(src.states), [None] * len(src)) for src in compiled.sources]
    for i, stage in enumerate(compiled.stages, start=1):
        report = StageReport(i, stage.kind, stage.label, stage.function.label,
                             input_count=sum(len(g.states) for g in groups))
        reports.append(report)
        started = time.time()
        logger.info("[+] Stage %d/%d: %s (%d states)", i, len(compiled.stages), stage.label, report.input_count)
        if stage.kind == "reduce":
            groups = await _run_reduce(i, stage, groups, policy, report, errors)
        else:
            groups = await _run_pointwise(i, stage, groups, policy, report, errors)
        report.output_count = sum(len(g.states) for g in groups)
        report.duration_s = time.time() - started
        if report.failures:
            logger.warning("[!] Stage %d: %d failures", i, report.failures)
    return groups


def _prepare_run_dir(compiled: CompiledWorkflow, out_dir: Optional[str]) -> str:
    if out_dir is not None:
        return init_run_dir(out_dir, compiled.name)
    removed = cleanup_unsaved_runs()
    if removed:
        logger.info("[+] Removed %d unsaved runs", len(removed))
    return create_run_dir(compiled.name)


def _outputs_doc(compiled: CompiledWorkflow, states: list[State]) -> dict[str, Any]:
    return {
        "workflow": compiled.name,
        "type": compiled.final_type.name,
        "states": [s.as_dict() for s in states],
    }


def run_workflow(compiled: CompiledWorkflow, backend: Backend, policy: Optional[ExecutionPolicy] = None,
                 out_dir: Optional[str] = None, trace_path: Optional[str] = None,
                 backend_name: Optional[str] = None) -> RunOutcome:
    """Execute ``compiled`` and write its artifacts. Raises on fail_fast errors after writing the trace."""
    policy = policy or compiled.policy
    run_dir = _prepare_run_dir(compiled, out_dir)
    trace_path = trace_path or os.path.join(run_dir, TRACE_FILE)
    os.makedirs(os.path.dirname(os.path.abspath(trace_path)), exist_ok=True)
    if os.path.exists(trace_path):
        os.remove(trace_path)
    sink = trace.JsonlSink(trace_path)

    timestamp = datetime.datetime.now().astimezone().isoformat()
    started = time.time()
    reports: list[StageReport] = []
    errors: list[str] = []
    groups: list[_Group] = []
    failure: Optional[TransduceError] = None

    logger.info("[+] Running workflow %s into %s", compiled.name, run_dir)
    with trace.tracing(sink), use_backend(backend):
        try:
            groups = asyncio.run(execute(compiled, policy, reports, errors))
        except TransduceError as e:
            failure = e
            errors.append(f"{type(e).__name__}: {e}")
            logger.error("[x] Workflow %s failed: %s", compiled.name, e)
    sink.compact()

    states = [s for g in groups for s in g.states]
    final_ids = [rid for g in groups for rid in g.record_ids if rid is not None]
    outputs_path = os.path.join(run_dir, PARTIAL_OUTPUTS_FILE if errors else OUTPUTS_FILE)
    if failure is None:
        write_json_atomic(outputs_path, _outputs_doc(compiled, states), canonical=True)
        logger.info("[+] %d %s states written to %s", len(states), compiled.final_type.name, outputs_path)

    summary = build_run_summary(
        workflow=compiled.name,
        backend=backend_name or getattr(backend, "model_name", "?"),
        policy=policy.model_dump(),
        stages=reports,
        final_type=compiled.final_type.name,
        output_count=len(states),
        final_record_ids=final_ids,
        errors=errors,
        timestamp=timestamp,
        execution_duration_s=time.time() - started,
    )
    summary_path = save_run_summary(summary, os.path.join(run_dir, SUMMARY_FILE))
    update_metadata(run_dir, status=summary["status"], final_record_ids=final_ids)

    if failure is not None:
        raise failure
    return RunOutcome(run_dir, states, final_ids, reports, errors, outputs_path, trace_path, summary_path)
