"""Annotation-domain configuration.

A single JSON file describes the annotation domain (what an annotation is
called, which catalog columns hold its content, how prompts talk about it)
plus runtime tuning knobs. Prompt templates never hardcode the domain; they
carry uppercase placeholders that `interpolate` fills from the loaded
config, so retargeting the engine to a new annotation type is a config
change, not a code change.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, NamedTuple

from .errors import LabelForgeError, ParseError, ValidationError


class UnknownPlaceholder(LabelForgeError):
    """Template used a placeholder outside the documented set."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown placeholder {{{name}}}")


class ConfidenceThresholds(NamedTuple):
    high: int = 85
    medium: int = 60


def naive_plural(word: str) -> str:
    if re.search(r"(s|x|z|ch|sh)$", word, re.IGNORECASE):
        return word + "es"
    return word + "s"


@dataclass(frozen=True)
class AnnotationConfig:
    """Domain vocabulary plus engine tuning parameters."""

    annotation_type: str
    primary_column: str
    secondary_column: str | None = None
    match_verb: str = "match"
    user_input_label: str = "utterance"
    annotation_type_plural: str = ""  # derived from annotation_type when empty
    annotation_lower: str = ""  # derived from annotation_type when empty
    enable_embeddings: bool = True
    few_shot_count_per_agent: int = 5
    confidence_thresholds: ConfidenceThresholds = ConfidenceThresholds()
    top_n_results: int = 5
    retrieval_top_k: int = 50
    embedding_dims: int = 3072
    agent_timeout_ms: float = 2000.0
    judge_timeout_ms: float = 200.0
    planner_cache_ttl_s: float = 86400.0
    batch_size: int = 100
    max_retries: int = 3
    worker_count: int = 50
    max_prompt_chars: int = 24000

    def __post_init__(self):
        if not self.annotation_type_plural:
            object.__setattr__(
                self, "annotation_type_plural", naive_plural(self.annotation_type)
            )
        if not self.annotation_lower:
            object.__setattr__(self, "annotation_lower", self.annotation_type.lower())
        _validate(self)

    @property
    def is_faq(self) -> bool:
        return self.annotation_type.strip().upper() == "FAQ"


@dataclass(frozen=True)
class RuntimeProfile:
    """Deployment-level switches kept out of the domain config."""

    mode: str = "realtime"  # realtime | batch
    provider_kind: str = "mock"  # mock | http
    audit_retention_days: int = 90

    def __post_init__(self):
        if self.mode not in ("realtime", "batch"):
            raise ValidationError("mode", f"unsupported mode {self.mode!r}")
        if self.provider_kind not in ("mock", "http"):
            raise ValidationError("provider_kind", f"unsupported provider {self.provider_kind!r}")
        if self.audit_retention_days < 1:
            raise ValidationError("audit_retention_days", "must be >= 1")


def _validate(cfg: AnnotationConfig) -> None:
    if not cfg.annotation_type.strip():
        raise ValidationError("annotation_type", "must be non-empty")
    if not cfg.primary_column.strip():
        raise ValidationError("primary_column", "must be non-empty")
    if cfg.secondary_column is not None and cfg.secondary_column == cfg.primary_column:
        raise ValidationError("secondary_column", "must differ from primary_column")
    if not cfg.match_verb.strip():
        raise ValidationError("match_verb", "must be non-empty")
    if not cfg.user_input_label.strip():
        raise ValidationError("user_input_label", "must be non-empty")
    high, medium = cfg.confidence_thresholds.high, cfg.confidence_thresholds.medium
    if not (0 <= medium < high <= 100):
        raise ValidationError(
            "confidence_thresholds", f"need 0 <= medium < high <= 100, got ({high}, {medium})"
        )
    for name, minimum in (
        ("few_shot_count_per_agent", 1),
        ("top_n_results", 1),
        ("retrieval_top_k", 1),
        ("embedding_dims", 1),
        ("batch_size", 1),
        ("worker_count", 1),
        ("max_retries", 0),
        ("max_prompt_chars", 1000),
    ):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
            raise ValidationError(name, f"must be an integer >= {minimum}")
    for name in ("agent_timeout_ms", "judge_timeout_ms", "planner_cache_ttl_s"):
        value = getattr(cfg, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise ValidationError(name, "must be a positive number")


_CONFIG_KEYS = {f.name for f in fields(AnnotationConfig)}
_RUNTIME_KEYS = {f.name for f in fields(RuntimeProfile)}


def load_config(path: str | Path) -> AnnotationConfig:
    """Load and validate an AnnotationConfig from a JSON file."""
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top-level value must be an object")
    data = {k: v for k, v in raw.items() if k != "runtime"}
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ValidationError(unknown[0], "unknown config key")
    for required in ("annotation_type", "primary_column"):
        if required not in data:
            raise ValidationError(required, "missing required key")
    if "confidence_thresholds" in data:
        data["confidence_thresholds"] = _parse_thresholds(data["confidence_thresholds"])
    try:
        return AnnotationConfig(**data)
    except TypeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_runtime_profile(path: str | Path) -> RuntimeProfile:
    """Load the optional "runtime" section of a config file."""
    raw = _read_json(path)
    section = raw.get("runtime", {}) if isinstance(raw, dict) else {}
    if not isinstance(section, dict):
        raise ValidationError("runtime", "must be an object")
    unknown = sorted(set(section) - _RUNTIME_KEYS)
    if unknown:
        raise ValidationError(unknown[0], "unknown runtime key")
    return RuntimeProfile(**section)


def _read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def _parse_thresholds(value: Any) -> ConfidenceThresholds:
    if isinstance(value, dict):
        unknown = sorted(set(value) - {"high", "medium", "low"})
        if unknown:
            raise ValidationError("confidence_thresholds", f"unknown key {unknown[0]!r}")
        # "low" is accepted for compatibility; the low band is everything
        # below medium, so only its ordering is checked.
        low = value.get("low", 0)
        medium = value.get("medium", 60)
        if not isinstance(low, int) or isinstance(low, bool) or low > medium:
            raise ValidationError("confidence_thresholds", "need low <= medium")
        return ConfidenceThresholds(high=value.get("high", 85), medium=medium)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return ConfidenceThresholds(*value)
    raise ValidationError("confidence_thresholds", "must be an object with high/medium")


# The only placeholders templates may use. Anything else in {UPPER_CASE}
# braces is treated as an authoring error rather than silently passed through.
PLACEHOLDERS = (
    "ANNOTATION_TYPE",
    "ANNOTATION_TYPE_PLURAL",
    "ANNOTATION_LOWER",
    "MATCH_VERB",
    "USER_INPUT_LABEL",
)

_PLACEHOLDER_RE = re.compile(r"\{([A-Z][A-Z_]*)\}")


def interpolate(template: str, config: AnnotationConfig) -> str:
    """Fill config placeholders in a template.

    Only uppercase brace tokens are claimed; runtime slots like {query}
    stay untouched for later substitution. Unknown uppercase tokens raise
    UnknownPlaceholder. Applying interpolate to its own output is a no-op
    as long as the config values themselves contain no placeholders.
    """
    mapping = {
        "ANNOTATION_TYPE": config.annotation_type,
        "ANNOTATION_TYPE_PLURAL": config.annotation_type_plural,
        "ANNOTATION_LOWER": config.annotation_lower,
        "MATCH_VERB": config.match_verb,
        "USER_INPUT_LABEL": config.user_input_label,
    }

    def _sub(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in mapping:
            raise UnknownPlaceholder(name)
        return mapping[name]

    return _PLACEHOLDER_RE.sub(_sub, template)


def with_overrides(config: AnnotationConfig, **overrides: Any) -> AnnotationConfig:
    """Return a copy of the config with the given fields replaced."""
    return replace(config, **overrides)
