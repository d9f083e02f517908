"""
workflow.py
-----------
Declarative workflow files: record types, functions, data sources and a
linear stage list (map / compose / reduce), loaded from JSON or YAML.

``check_workflow`` collects every problem it finds into one WorkflowError
instead of stopping at the first, and on success returns a
CompiledWorkflow with functions built and sources loaded, ready to run.
"""
from __future__ import annotations

import json
import logging
import os
import string
from dataclasses import dataclass, field
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from transduce.common import canonical_dumps
from transduce.errors import CompositionTypeMismatch, TransduceError, WorkflowError
from transduce.ingest import DataSource, load_source
from transduce.schema_core import RecordType, State, TypeRegistry, records_from_dicts, to_plain, validate
from transduce.settings import ExecutionPolicy, TransductionConfig, build
from transduce.transduction import TransducibleFunction, compose, identity, make_reducer, make_transduction

logger = logging.getLogger(__name__)


# ============================================================
#  File model
# ============================================================

class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SlotDoc(_Doc):
    name: str
    type: Union[str, dict[str, Any]]
    description: str = ""
    optional: bool = False
    enum: Optional[list[str]] = None


class TypeDoc(_Doc):
    name: str
    description: str = ""
    slots: list[SlotDoc] = Field(default_factory=list)


class FunctionDoc(_Doc):
    name: str
    source: str
    target: str
    kind: Literal["transduction", "identity"] = "transduction"
    reducer: bool = False
    instructions: str = ""
    model: Optional[str] = None
    temperature: Optional[float] = None
    max_retries: Optional[int] = None
    explanation: bool = False
    tools: list[str] = Field(default_factory=list)


class SourceDoc(_Doc):
    name: str
    path: str
    type: str
    format: Literal["csv", "json"] = "csv"
    header_map: Optional[dict[str, str]] = None


class ContextDoc(_Doc):
    type: str
    values: Optional[dict[str, Any]] = None
    path: Optional[str] = None


class StageDoc(_Doc):
    kind: Literal["map", "compose", "reduce"]
    name: Optional[str] = None
    function: Optional[str] = None
    functions: list[str] = Field(default_factory=list)
    combiner: Optional[str] = None
    per_source: bool = False


class OutputDoc(_Doc):
    type: Optional[str] = None


class WorkflowDefinition(_Doc):
    name: str
    description: str = ""
    types: list[TypeDoc] = Field(default_factory=list)
    functions: list[FunctionDoc] = Field(default_factory=list)
    sources: list[SourceDoc] = Field(min_length=1)
    context: Optional[ContextDoc] = None
    stages: list[StageDoc] = Field(min_length=1)
    output: OutputDoc = Field(default_factory=OutputDoc)
    mock_rules: Optional[str] = None
    policy: dict[str, Any] = Field(default_factory=dict)


def load_workflow(path: str) -> WorkflowDefinition:
    try:
        with open(path, encoding="utf-8") as f:
            if path.endswith((".yaml", ".yml")):
                raw = yaml.safe_load(f)
            else:
                raw = json.load(f)
    except FileNotFoundError:
        raise WorkflowError([f"workflow file not found: {path}"]) from None
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise WorkflowError([f"workflow file {path} does not parse: {e}"]) from e
    try:
        return WorkflowDefinition.model_validate(raw)
    except ValidationError as e:
        raise WorkflowError([
            f"{'.'.join(str(p) for p in err.get('loc', ())) or 'workflow'}: {err.get('msg')}"
            for err in e.errors()
        ]) from e


# ============================================================
#  Compiled form
# ============================================================

@dataclass
class CompiledStage:
    kind: str
    label: str
    function: TransducibleFunction
    combiner: Optional[TransducibleFunction] = None
    per_source: bool = False


@dataclass
class CompiledWorkflow:
    definition: WorkflowDefinition
    base_dir: str
    types: dict[str, RecordType]
    functions: dict[str, TransducibleFunction]
    sources: list[DataSource]
    stages: list[CompiledStage]
    final_type: RecordType
    policy: ExecutionPolicy
    context: Optional[State] = None
    rules_path: Optional[str] = None
    warnings: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.definition.name


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _placeholders(text: str) -> list[str]:
    try:
        return [name for _, name, _, _ in string.Formatter().parse(text) if name is not None]
    except ValueError:
        return ["<unbalanced brace>"]


def _render(text: str, context: Optional[State]) -> str:
    if context is None or not _placeholders(text):
        return text
    values = {k: v if isinstance(v, (str, int, float, bool)) else canonical_dumps(to_plain(v))
              for k, v in context.values.items()}
    return text.format_map(values)


class _Checker:
    def __init__(self, defn: WorkflowDefinition, base_dir: str):
        self.defn = defn
        self.base_dir = base_dir
        self.diagnostics: list[str] = []
        self.types: dict[str, RecordType] = {}
        self.functions: dict[str, TransducibleFunction] = {}

    def error(self, message: str) -> None:
        self.diagnostics.append(message)

    def type_named(self, name: str, where: str) -> Optional[RecordType]:
        rt = self.types.get(name)
        if rt is None:
            self.error(f"{where}: unknown type {name!r}")
        return rt

    def build_types(self) -> None:
        try:
            self.types = records_from_dicts(
                [t.model_dump(exclude_none=True) for t in self.defn.types], registry=TypeRegistry()
            )
        except TransduceError as e:
            self.error(f"types: {e}")

    def build_context(self) -> Optional[State]:
        doc = self.defn.context
        if doc is None:
            return None
        rt = self.type_named(doc.type, "context")
        if rt is None:
            return None
        values = doc.values
        if doc.path is not None:
            path = _resolve(self.base_dir, doc.path)
            try:
                with open(path, encoding="utf-8") as f:
                    values = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                self.error(f"context: cannot read {doc.path}: {e}")
                return None
        try:
            return validate(values or {}, rt)
        except TransduceError as e:
            self.error(f"context: {e}")
            return None

    def build_functions(self, context: Optional[State]) -> None:
        names = set()
        for doc in self.defn.functions:
            where = f"function {doc.name}"
            if doc.name in names:
                self.error(f"{where}: declared twice")
                continue
            names.add(doc.name)
            source = self.type_named(doc.source, where)
            target = self.type_named(doc.target, where)
            if source is None or target is None:
                continue
            if doc.tools:
                self.error(f"{where}: tools are not supported")
                continue
            missing = [p for p in _placeholders(doc.instructions) if context is None or p not in context.record_type]
            if missing:
                self.error(f"{where}: instructions reference {{{missing[0]}}}, which is not a context slot")
                continue
            if doc.kind == "identity":
                if source != target:
                    self.error(f"{where}: identity needs source == target")
                    continue
                self.functions[doc.name] = identity(source)
                continue
            try:
                config = build(
                    TransductionConfig,
                    instructions=_render(doc.instructions, context),
                    model=doc.model,
                    temperature=doc.temperature,
                    max_retries=doc.max_retries,
                    explanation_requested=doc.explanation,
                )
            except TransduceError as e:
                self.error(f"{where}: {e}")
                continue
            make = make_reducer if doc.reducer else make_transduction
            self.functions[doc.name] = make(target, source, config, name=doc.name)

    def build_sources(self) -> list[DataSource]:
        loaded = []
        for doc in self.defn.sources:
            where = f"source {doc.name}"
            rt = self.type_named(doc.type, where)
            path = _resolve(self.base_dir, doc.path)
            if not os.path.isfile(path):
                self.error(f"{where}: data file not found: {doc.path}")
                continue
            if rt is None:
                continue
            try:
                loaded.append(load_source(doc.name, path, rt, doc.format, doc.header_map))
            except (TransduceError, OSError) as e:
                self.error(f"{where}: {e}")
        return loaded

    def function_named(self, name: Optional[str], where: str) -> Optional[TransducibleFunction]:
        if name is None:
            self.error(f"{where}: no function given")
            return None
        f = self.functions.get(name)
        if f is None and name not in {d.name for d in self.defn.functions}:
            self.error(f"{where}: unknown function {name!r}")
        return f

    def build_stages(self, start: Optional[RecordType]) -> tuple[list[CompiledStage], Optional[RecordType]]:
        stages: list[CompiledStage] = []
        current = start
        for i, doc in enumerate(self.defn.stages, start=1):
            label = doc.name or f"{doc.kind} {doc.function or ' . '.join(doc.functions)}"
            where = f"stage {i} ({label})"
            if doc.kind == "compose":
                if len(doc.functions) < 2:
                    self.error(f"{where}: compose needs at least two functions")
                    current = None
                    continue
                parts = [self.function_named(n, where) for n in doc.functions]
                if any(p is None for p in parts):
                    current = None
                    continue
                f = parts[0]
                try:
                    for g in parts[1:]:
                        f = compose(g, f)
                except CompositionTypeMismatch as e:
                    self.error(f"{where}: {e}")
                    current = None
                    continue
            else:
                f = self.function_named(doc.function, where)
                if f is None:
                    current = None
                    continue

            if doc.kind == "reduce" and not f.over_collection:
                self.error(f"{where}: {doc.function} is not a reducer")
                current = None
                continue
            if doc.kind != "reduce" and f.over_collection:
                self.error(f"{where}: {doc.function} is a reducer; use a reduce stage")
                current = None
                continue
            if current is not None and f.source != current:
                self.error(f"{where}: expects {f.source.name} but receives {current.name}")

            combiner = None
            if doc.kind == "reduce":
                if doc.combiner is not None:
                    combiner = self.function_named(doc.combiner, where)
                    if combiner is not None and (
                        not combiner.over_collection or combiner.source != f.target or combiner.target != f.target
                    ):
                        self.error(f"{where}: combiner {doc.combiner} must reduce {f.target.name} to {f.target.name}")
                elif f.source != f.target:
                    self.error(f"{where}: reducer {doc.function} changes the type "
                               f"({f.source.name} -> {f.target.name}) and needs a combiner")
            elif doc.combiner is not None or doc.per_source:
                self.error(f"{where}: combiner/per_source only apply to reduce stages")

            stages.append(CompiledStage(doc.kind, label, f, combiner, doc.per_source))
            current = f.target
        return stages, current

    def source_type(self) -> Optional[RecordType]:
        names = sorted({s.type for s in self.defn.sources})
        if len(names) > 1:
            self.error(f"sources: all sources must share one record type (found {', '.join(names)})")
            return None
        return self.types.get(names[0]) if names else None


def check_workflow(defn: WorkflowDefinition, base_dir: str = ".") -> CompiledWorkflow:
    checker = _Checker(defn, base_dir)
    checker.build_types()
    if checker.diagnostics:
        raise WorkflowError(checker.diagnostics)

    try:
        policy = build(ExecutionPolicy, defn.policy)
    except TransduceError as e:
        checker.error(f"policy: {e}")
        policy = ExecutionPolicy()

    context = checker.build_context()
    checker.build_functions(context)
    sources = checker.build_sources()
    stages, final_type = checker.build_stages(checker.source_type())

    if defn.output.type is not None and final_type is not None and defn.output.type != final_type.name:
        checker.error(f"output: pipeline produces {final_type.name}, not {defn.output.type}")

    rules_path = None
    if defn.mock_rules is not None:
        rules_path = _resolve(base_dir, defn.mock_rules)
        if not os.path.isfile(rules_path):
            checker.error(f"mock_rules: file not found: {defn.mock_rules}")

    if checker.diagnostics or final_type is None:
        raise WorkflowError(checker.diagnostics or ["pipeline has no resolvable output type"])

    logger.info("[+] Workflow %s: %d stages, %d sources", defn.name, len(stages), len(sources))
    return CompiledWorkflow(
        definition=defn,
        base_dir=base_dir,
        types=checker.types,
        functions=checker.functions,
        sources=sources,
        stages=stages,
        final_type=final_type,
        policy=policy,
        context=context,
        rules_path=rules_path,
    )


def compile_workflow_file(path: str) -> CompiledWorkflow:
    return check_workflow(load_workflow(path), os.path.dirname(os.path.abspath(path)))
