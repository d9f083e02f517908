"""
backend.py
----------
LLM-backed kernels: prompt assembly, envelope decoding/validation,
validate-and-retry, an OpenAI-compatible HTTP transport and a rule-driven
mock backend.

Model replies are one JSON object (the envelope):

    {"value": <target state>, "explanation": "...",
     "relevant_source_attributes": [...], "confidence": 0.9,
     "provenance": {"<target slot>": ["<source slot>", ...]}}

``provenance`` is optional; when absent every target slot cites
``relevant_source_attributes``.
"""
from __future__ import annotations

import asyncio
import logging
import os
import re
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence

from transduce.common import canonical_dumps
from transduce.errors import (
    ConfigError,
    InvalidConfidence,
    InvalidProvenance,
    NoMatchingRule,
    ParseError,
    SchemaViolation,
    Timeout,
    TransportError,
    ValidationFailure,
)
from transduce.schema_core import (
    RecordType,
    State,
    json_schema_of,
    parse_json,
    to_plain,
    validate,
)
from transduce.settings import BackendConfig
from transduce.transduction import Explanation, Payload, ProvenanceMap, Transduction, TransducibleFunction

logger = logging.getLogger(__name__)

RETRY_FEEDBACK_PREFIX = "Your previous output was invalid:"

ENVELOPE_FIELDS = ("value", "explanation", "relevant_source_attributes", "confidence", "provenance")


# ============================================================
#  Prompt assembly
# ============================================================

@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    response_schema: dict[str, Any] = field(hash=False)

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user},
        ]


def _slot_lines(rt: RecordType) -> list[str]:
    lines = []
    for s in rt.slots:
        kind = s.slot_type.describe()
        if s.optional:
            kind += ", optional"
        if s.enum is not None:
            kind += ", one of " + " | ".join(s.enum)
        lines.append(f"- {s.name} ({kind})" + (f": {s.description}" if s.description else ""))
    return lines or ["- (no slots)"]


def envelope_schema(target: RecordType, source: RecordType) -> dict[str, Any]:
    """json_schema_of(target) wrapped in the explanation/provenance envelope."""
    if source.slots:
        names: dict[str, Any] = {"type": "string", "enum": list(source.slot_names)}
    else:
        names = {"type": "string"}
    evidence = {"type": "array", "items": names, "minItems": 1}
    return {
        "type": "object",
        "title": f"{target.name}Envelope",
        "properties": {
            "value": json_schema_of(target),
            "explanation": {"type": "string"},
            "relevant_source_attributes": evidence,
            "confidence": {"type": "number", "minimum": 0, "maximum": 1},
            "provenance": {
                "type": "object",
                "properties": {name: evidence for name in target.slot_names},
                "additionalProperties": False,
            },
        },
        "required": ["value", "explanation", "relevant_source_attributes", "confidence"],
        "additionalProperties": False,
    }


def build_prompt(spec: TransducibleFunction, payload: Payload) -> PromptBundle:
    source, target, config = spec.source, spec.target, spec.config
    many = isinstance(payload, (list, tuple))
    lines = [
        f"You are a typed transformation producing one {target.name} from "
        + (f"a list of {source.name} states." if many else f"one {source.name} state."),
        "",
        "Instructions:",
        config.instructions or f"Transform the input into a {target.name}.",
        "",
        f"Target type {target.name}" + (f" ({target.description})" if target.description else "") + ":",
        *_slot_lines(target),
        "",
        f"Source type {source.name}" + (f" ({source.description})" if source.description else "") + ":",
        *_slot_lines(source),
    ]
    if many:
        lines += [
            "",
            f"The input is a JSON array of {len(payload)} {source.name} states (one batch); "
            "aggregate all of them into a single output.",
        ]
    lines += [
        "",
        "Respond with exactly one JSON object with the keys:",
        f'- "value": the {target.name} object',
        '- "explanation": why the value follows from the input',
        '- "relevant_source_attributes": non-empty list of source slot names you relied on',
        '- "confidence": number between 0 and 1',
        '- "provenance": object mapping every target slot to a non-empty list of source slot names',
    ]
    user = canonical_dumps(to_plain(list(payload) if many else payload))
    return PromptBundle("\n".join(lines), user, envelope_schema(target, source))


# ============================================================
#  Decoding
# ============================================================

_FENCE = re.compile(r"^```[a-zA-Z0-9_-]*\s*|\s*```$")


def strip_fences(raw: str) -> str:
    text = (raw or "").strip()
    if text.startswith("```"):
        text = _FENCE.sub("", text)
    return text.strip()


def _names(value: Any, what: str, source: RecordType) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise InvalidProvenance(f"{what} must be a list of slot names")
    if source.slots and not value:
        raise InvalidProvenance(f"{what} is empty")
    unknown = [v for v in value if v not in source]
    if unknown:
        raise InvalidProvenance(f"{what} cites {unknown[0]!r}, not a slot of {source.name}")
    return value


def decode_envelope(doc: Any, target: RecordType, source: RecordType,
                    n_elements: int | None = None) -> Transduction:
    if not isinstance(doc, Mapping):
        raise SchemaViolation("envelope is not a JSON object")
    extra = sorted(k for k in doc if k not in ENVELOPE_FIELDS and k != "element_evidence")
    if extra:
        raise SchemaViolation(f"envelope has unexpected key {extra[0]!r}")
    if "value" not in doc:
        raise SchemaViolation("envelope has no 'value'")
    try:
        state = validate(doc["value"], target)
    except ValidationFailure as e:
        raise SchemaViolation(f"{type(e).__name__} {e.slot}: {e}", cause=e) from e

    text = doc.get("explanation")
    if not isinstance(text, str):
        raise SchemaViolation("'explanation' must be text")
    relevant = _names(doc.get("relevant_source_attributes"), "relevant_source_attributes", source)

    confidence = doc.get("confidence")
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise SchemaViolation("'confidence' must be a number")
    if not 0 <= confidence <= 1:
        raise InvalidConfidence(confidence)

    raw_prov = doc.get("provenance")
    if raw_prov is None:
        raw_prov = {name: relevant for name in target.slot_names}
    if not isinstance(raw_prov, Mapping):
        raise InvalidProvenance("provenance must be an object")
    entries = {name: _names(v, f"provenance[{name}]", source) for name, v in raw_prov.items()}
    provenance = ProvenanceMap(entries)
    provenance.check(source, target)

    evidence = None
    if doc.get("element_evidence") is not None:
        evidence = _decode_element_evidence(doc["element_evidence"], target, n_elements)

    return Transduction(state, Explanation(text, tuple(relevant), float(confidence)), provenance, evidence)


def _decode_element_evidence(doc: Any, target: RecordType, n: int | None) -> dict[str, tuple[int, ...]]:
    if not isinstance(doc, Mapping):
        raise InvalidProvenance("element_evidence must be an object")
    out = {}
    for name in target.slot_names:
        idx = doc.get(name)
        if not isinstance(idx, list) or not idx:
            raise InvalidProvenance(f"element_evidence[{name}] must be a non-empty list of indices")
        for i in idx:
            if isinstance(i, bool) or not isinstance(i, int) or i < 0 or (n is not None and i >= n):
                raise InvalidProvenance(f"element_evidence[{name}] has out-of-range index {i!r}")
        out[name] = tuple(sorted(set(idx)))
    return out


def decode_and_validate(raw: str | bytes, target: RecordType, source: RecordType,
                        n_elements: int | None = None) -> Transduction:
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    return decode_envelope(parse_json(strip_fences(raw)), target, source, n_elements)


# ============================================================
#  Transport + retry
# ============================================================

class Transport(Protocol):
    async def complete(self, messages: Sequence[Mapping[str, str]], response_schema: Mapping[str, Any],
                       cfg: BackendConfig) -> str: ...


def _schema_name(schema: Mapping[str, Any]) -> str:
    return re.sub(r"[^a-zA-Z0-9_-]", "_", str(schema.get("title") or "envelope"))[:64]


class OpenAITransport:
    """Chat completions over any OpenAI-compatible endpoint."""

    def __init__(self, cfg: BackendConfig, api_key: str):
        self.cfg = cfg
        self._api_key = api_key
        self._client = None

    def _get_client(self):
        if self._client is None:
            from openai import AsyncOpenAI
            self._client = AsyncOpenAI(
                base_url=self.cfg.endpoint,
                api_key=self._api_key,
                timeout=self.cfg.timeout,
                max_retries=0,
            )
        return self._client

    async def complete(self, messages, response_schema, cfg):
        import openai

        try:
            resp = await self._get_client().chat.completions.create(
                model=cfg.model,
                messages=list(messages),
                temperature=cfg.temperature,
                response_format={
                    "type": "json_schema",
                    "json_schema": {"name": _schema_name(response_schema), "schema": dict(response_schema)},
                },
            )
        except openai.APITimeoutError as e:
            raise Timeout(f"request to {cfg.endpoint} timed out after {cfg.timeout}s") from e
        except (openai.APIConnectionError, openai.APIStatusError) as e:
            raise TransportError(f"{type(e).__name__}: {e}") from e
        return resp.choices[0].message.content or ""


async def call_with_retry(bundle: PromptBundle, cfg: BackendConfig, transport: Transport,
                          target: RecordType, source: RecordType,
                          n_elements: int | None = None) -> Transduction:
    """Send, decode, and on failure re-send with the error appended; ``max_retries`` extra attempts."""
    messages = bundle.messages()
    attempts = cfg.max_retries + 1
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            raw = await transport.complete(messages, bundle.response_schema, cfg)
        except (TransportError, Timeout) as e:
            last = e
            logger.warning("[!] Attempt %d/%d: %s", attempt + 1, attempts, e)
            continue
        try:
            result = decode_and_validate(raw, target, source, n_elements)
        except (ParseError, SchemaViolation) as e:
            last = e
            logger.warning("[!] Attempt %d/%d produced invalid output: %s", attempt + 1, attempts, e)
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": f"{RETRY_FEEDBACK_PREFIX} {e}"},
            ]
            continue
        if attempt:
            logger.info("[+] Valid output after %d retries", attempt)
        return replace(result, retries=attempt)

    if isinstance(last, (TransportError, Timeout)):
        raise last
    raise SchemaViolation(f"no valid output after {attempts} attempts: {last}", cause=last, attempts=attempts)


class HttpBackend:
    def __init__(self, cfg: BackendConfig, transport: Transport):
        self.cfg = cfg
        self.transport = transport

    @property
    def model_name(self) -> str:
        return self.cfg.model

    def effective_config(self, spec: TransducibleFunction) -> BackendConfig:
        return self.cfg.model_copy(update={
            "model": spec.config.model or self.cfg.model,
            "temperature": spec.config.temperature,
            "max_retries": spec.config.max_retries,
        })

    async def run(self, spec: TransducibleFunction, payload: Payload) -> Transduction:
        bundle = build_prompt(spec, payload)
        n = len(payload) if isinstance(payload, (list, tuple)) else None
        return await call_with_retry(bundle, self.effective_config(spec), self.transport,
                                     spec.target, spec.source, n)


def backend_from_env(cfg: BackendConfig | None = None) -> HttpBackend:
    cfg = cfg or BackendConfig()
    api_key = os.environ.get(cfg.api_key_env)
    if not api_key:
        raise ConfigError(f"environment variable {cfg.api_key_env} is not set", field="api_key_env")
    logger.info("[+] HTTP backend: model=%s endpoint=%s", cfg.model, cfg.endpoint)
    return HttpBackend(cfg, OpenAITransport(cfg, api_key))


# ============================================================
#  Mock backend
# ============================================================

@dataclass(frozen=True)
class MockOutput:
    values: Mapping[str, Any]
    explanation: str = "mock rule"
    relevant_source_attributes: Optional[Sequence[str]] = None
    confidence: Any = 1.0
    provenance: Optional[Mapping[str, Iterable[str]]] = None
    element_evidence: Optional[Mapping[str, Iterable[int]]] = None


Producer = Callable[[Payload, TransducibleFunction], Any]


@dataclass(frozen=True)
class MockRule:
    """First-match rule: every given matcher field must agree with the function."""

    producer: Producer
    source: Optional[str] = None
    target: Optional[str] = None
    instructions: Optional[str] = None
    name: str = ""

    def matches(self, spec: TransducibleFunction) -> bool:
        if self.source is not None and self.source != spec.source.name:
            return False
        if self.target is not None and self.target != spec.target.name:
            return False
        if self.instructions is not None and self.instructions not in spec.config.instructions:
            return False
        return True


def _envelope(out: Any, spec: TransducibleFunction) -> Any:
    if isinstance(out, State):
        out = MockOutput(out.as_dict())
    if not isinstance(out, MockOutput):
        out = MockOutput(out)
    relevant = list(out.relevant_source_attributes) if out.relevant_source_attributes is not None \
        else list(spec.source.slot_names)
    env: dict[str, Any] = {
        "value": to_plain(out.values),
        "explanation": out.explanation,
        "relevant_source_attributes": relevant,
        "confidence": out.confidence,
    }
    if out.provenance is not None:
        env["provenance"] = {k: list(v) for k, v in out.provenance.items()}
    if out.element_evidence is not None:
        env["element_evidence"] = {k: list(v) for k, v in out.element_evidence.items()}
    return env


def mock_invoke(rules: Sequence[MockRule], spec: TransducibleFunction, payload: Payload) -> Transduction:
    for rule in rules:
        if rule.matches(spec):
            break
    else:
        raise NoMatchingRule(spec.source.name, spec.target.name)
    envelope = _envelope(rule.producer(payload, spec), spec)
    n = len(payload) if isinstance(payload, (list, tuple)) else None
    try:
        raw = canonical_dumps(envelope)
    except (TypeError, ValueError) as e:
        raise SchemaViolation(f"mock rule {rule.name or '?'} produced a non-JSON value: {e}") from e
    return decode_and_validate(raw, spec.target, spec.source, n)


class MockBackend:
    """Rule-table backend. Counts calls and tracks the in-flight high-water mark."""

    model_name = "mock"

    def __init__(self, rules: Sequence[MockRule], latency: Callable[[Payload], float] | None = None):
        self.rules = list(rules)
        self.latency = latency
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0

    async def run(self, spec: TransducibleFunction, payload: Payload) -> Transduction:
        self.calls += 1
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.latency is not None:
                await asyncio.sleep(self.latency(payload))
            return mock_invoke(self.rules, spec, payload)
        finally:
            self.in_flight -= 1


def copy_rule(source: str | None = None, target: str | None = None, instructions: str | None = None) -> MockRule:
    """Target slots copy same-named source slots; provenance = {that slot}."""

    def produce(x: State, spec: TransducibleFunction) -> MockOutput:
        values: dict[str, Any] = {}
        prov: dict[str, list[str]] = {}
        for name in spec.target.slot_names:
            if name in x.record_type:
                values[name] = x[name]
                prov[name] = [name]
            else:
                values[name] = None
                prov[name] = list(spec.source.slot_names)
        cited = {n for p in prov.values() for n in p}
        relevant = [n for n in spec.source.slot_names if n in cited] or list(spec.source.slot_names)
        return MockOutput(values, "copied same-named slots", relevant, 1.0, prov)

    return MockRule(produce, source, target, instructions, name="copy")
