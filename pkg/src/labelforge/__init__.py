"""Multi-agent annotation engine.

Ranks a catalog of annotations against a user utterance by fanning the
query out to several differently-configured ranking agents in parallel,
reconciling their outputs with a judge model (or a weighted fallback when
the judge is unavailable), and routing the result by confidence band.
"""

from .clock import Clock, ManualClock, SystemClock
from .config import AnnotationConfig, ConfidenceThresholds, RuntimeProfile, load_config
from .errors import LabelForgeError, ParseError, ValidationError
from .judge import AgentWeights, JudgeResult, RankedCandidate, fallback_rank
from .knowledge_base import AnnotationEntry, Catalog, TrainingExample, ingest_catalog
from .pipeline import (
    AllAgentsFailed,
    AnnotationEngine,
    AnnotationResult,
    EngineOptions,
    RoutingDecision,
    route,
)
from .providers import HttpProvider, MockProvider, make_provider
from .prompting import StructuredVerdict, parse_structured

__version__ = "0.1.0"

__all__ = [
    "AgentWeights",
    "AllAgentsFailed",
    "AnnotationConfig",
    "AnnotationEngine",
    "AnnotationEntry",
    "AnnotationResult",
    "Catalog",
    "Clock",
    "ConfidenceThresholds",
    "EngineOptions",
    "HttpProvider",
    "JudgeResult",
    "LabelForgeError",
    "ManualClock",
    "MockProvider",
    "ParseError",
    "RankedCandidate",
    "RoutingDecision",
    "RuntimeProfile",
    "StructuredVerdict",
    "SystemClock",
    "TrainingExample",
    "ValidationError",
    "fallback_rank",
    "ingest_catalog",
    "load_config",
    "make_provider",
    "parse_structured",
    "route",
    "__version__",
]
