"""
settings.py
-----------
Configuration models and environment defaults.

All knobs are pydantic models so invariants (batch_size >= 2, timeout > 0,
...) are enforced once, at construction. ``build`` turns pydantic's
ValidationError into ConfigError naming the offending field.
"""
from __future__ import annotations

import logging
import os
from typing import Any, Literal, Optional, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from transduce.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4.1-mini"
DEFAULT_API_KEY_ENV = "OPENAI_API_KEY"


def load_env(path: str | None = None) -> Optional[str]:
    """Load .env (or .env.example as a fallback). Returns the file used."""
    candidates = [path] if path else [".env", ".env.example"]
    for candidate in candidates:
        if candidate and os.path.exists(candidate):
            load_dotenv(candidate)
            logger.info("[+] Loaded environment from %s", candidate)
            return candidate
    logger.debug("No .env or .env.example found")
    return None


class TransductionConfig(BaseModel):
    """Per-function parameters (the `With(...)` knobs)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    instructions: str = ""
    model: Optional[str] = None
    temperature: float = Field(0.0, ge=0)
    explanation_requested: bool = False
    max_retries: int = Field(2, ge=0, le=10)
    batch_size: int = Field(20, ge=2)
    tools: tuple[str, ...] = ()


class BackendConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    endpoint: str = Field(default_factory=lambda: os.environ.get("TRANSDUCE_BASE_URL", DEFAULT_BASE_URL))
    model: str = Field(default_factory=lambda: os.environ.get("TRANSDUCE_MODEL", DEFAULT_MODEL))
    temperature: float = Field(0.0, ge=0)
    timeout: float = Field(60.0, gt=0)
    api_key_env: str = DEFAULT_API_KEY_ENV
    max_retries: int = Field(2, ge=0, le=10)


class ExecutionPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_concurrency: int = Field(8, gt=0)
    failure_mode: Literal["fail_fast", "collect"] = "collect"
    batch_size: int = Field(20, ge=2)


M = TypeVar("M", bound=BaseModel)


def build(model_cls: type[M], data: dict[str, Any] | None = None, **overrides: Any) -> M:
    """Construct a settings model, dropping None overrides, raising ConfigError."""
    payload = dict(data or {})
    payload.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model_cls(**payload)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first.get("loc", ())) or None
        raise ConfigError(f"invalid {model_cls.__name__}: {field}: {first.get('msg')}", field=field) from e
