"""Prompt assembly and structured-output handling.

Templates are domain-agnostic: every annotation-specific word comes from
config placeholders, so the same prompts serve FAQs, intents, or any other
annotation type. Prompt building is a pure function of its inputs, which
makes golden-prompt tests possible. Parsing goes the other way: model text
is recovered into a validated StructuredVerdict through staged extraction,
because real model output arrives wrapped in chatter, fences, or both.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass

from .config import AnnotationConfig, interpolate
from .errors import LabelForgeError
from .knowledge_base import AnnotationEntry, Catalog, TrainingExample
from .retrieval import tokenize


class UnparseableOutput(LabelForgeError):
    """No stage could recover a JSON object from the model text."""


class SchemaViolation(LabelForgeError):
    """A JSON object was recovered but failed schema validation."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class EmptyPool(LabelForgeError):
    pass


class EmptyCandidates(LabelForgeError):
    pass


# ---- agent specs -------------------------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    uses_embeddings: bool
    uses_secondary: bool
    emphasis: str
    temperature: float


# Four complementary rankers: primary-text vs full-content views, crossed
# with lexical vs embedding retrieval. Temperatures are spread across a
# small band so agents with identical pools still diversify.
DEFAULT_AGENT_SPECS = (
    AgentSpec("primary_no_emb", uses_embeddings=False, uses_secondary=False,
              emphasis="exact_match", temperature=0.10),
    AgentSpec("primary_emb", uses_embeddings=True, uses_secondary=False,
              emphasis="semantic_similarity", temperature=0.12),
    AgentSpec("full_no_emb", uses_embeddings=False, uses_secondary=True,
              emphasis="context_understanding", temperature=0.13),
    AgentSpec("full_emb", uses_embeddings=True, uses_secondary=True,
              emphasis="combined", temperature=0.15),
)

AGENT_IDS = tuple(spec.agent_id for spec in DEFAULT_AGENT_SPECS)


# ---- templates ---------------------------------------------------------------

BASE_SYSTEM_TEMPLATE = """You are an expert {ANNOTATION_TYPE} annotation system for enterprise support applications. Your role is to accurately {MATCH_VERB} user {USER_INPUT_LABEL}s to the most relevant {ANNOTATION_TYPE_PLURAL} from the knowledge base.

IMPORTANT GUIDELINES:
1. Analyze the user's intent thoroughly
2. Match the intent to the most relevant {ANNOTATION_TYPE_PLURAL}
3. Rank {ANNOTATION_TYPE_PLURAL} by relevance (0-100 scale)
4. Provide clear reasoning for each match
5. Return exactly 5 {ANNOTATION_TYPE_PLURAL} unless there are fewer relevant ones
6. Be precise - users need accurate information"""

RANKER_TASK_TEMPLATE = """You will be given a user {USER_INPUT_LABEL} and a list of available {ANNOTATION_TYPE_PLURAL}. Your task is to:

1. Analyze what the user is truly asking about (identify the core intent)
2. Search through the available {ANNOTATION_TYPE_PLURAL} for relevant matches
3. Rank the top 5 most relevant {ANNOTATION_TYPE_PLURAL} based on:
   - Semantic similarity to the user's intent
   - Specificity to the {USER_INPUT_LABEL}
   - Likelihood of being the correct {ANNOTATION_LOWER}
4. Provide a relevance score (0-100) for each match
5. Explain your reasoning process"""

EMPHASIS_TEXT = {
    "exact_match": "Emphasis: prioritize exact and near-exact wording matches between "
    "the {USER_INPUT_LABEL} and {ANNOTATION_LOWER} titles.",
    "semantic_similarity": "Emphasis: prioritize semantic similarity to the user's intent, "
    "even when the wording differs.",
    "context_understanding": "Emphasis: use the full {ANNOTATION_LOWER} content to understand "
    "context and disambiguate similar {ANNOTATION_TYPE_PLURAL}.",
    "combined": "Emphasis: combine exact matching, semantic similarity, and full-content "
    "context understanding.",
}

OUTPUT_FORMAT_TEMPLATE = """Respond with JSON only, using exactly this schema:
{
  "user_utterance": "<the {USER_INPUT_LABEL} you analyzed>",
  "intent_analysis": "<your analysis of the core intent>",
  "relevant_annotations": [
    {"annotation": "<{ANNOTATION_LOWER} title>", "relevance_score": <0-100>, "reasoning": "<why>"}
  ],
  "confidence": "<HIGH|MEDIUM|LOW>",
  "explanation_of_confidence": "<why that confidence>"
}"""

PLANNER_SYSTEM_PROMPT = (
    "You are an expert at analyzing user queries and planning retrieval strategies."
)

PLANNER_USER_TEMPLATE = """Analyze the following user {USER_INPUT_LABEL} for a {ANNOTATION_TYPE} annotation system.

"{query}"

Domain context: {domain_context}

Determine whether the query needs expansion to retrieve good candidates. Abbreviations, typos, and terse queries usually benefit from expansion with related phrasings; exact identifiers (codes, numbers) must be preserved as-is.

Respond with JSON only:
{{"intent": "<what the user wants>", "needs_expansion": <true|false>, "expanded_query": "<the query, expanded if needed>", "reasoning": "<why>"}}"""

JUDGE_SYSTEM_TEMPLATE = """You are an expert judge for an enterprise {ANNOTATION_TYPE} annotation system. Multiple specialized ranking agents have proposed candidate {ANNOTATION_TYPE_PLURAL} for a user {USER_INPUT_LABEL}. Your task is to rerank the combined candidates into a single final list.

Weigh agreement between agents, the agents' relevance scores and reasoning, and the full {ANNOTATION_LOWER} content. Do not invent candidates that are not in the list."""

JUDGE_OUTPUT_FORMAT = """Respond with JSON only, using exactly this schema:
{
  "reranked_annotations": [
    {"annotation": "<candidate title exactly as listed>", "final_score": <0-100>, "reasoning": "<why>"}
  ],
  "consensus_strength": "<STRONG|MODERATE|WEAK>",
  "confidence": "<HIGH|MEDIUM|LOW>"
}"""


# ---- few-shot allocation -----------------------------------------------------


@dataclass(frozen=True)
class FewShotAllocation:
    per_agent: dict[str, tuple[TrainingExample, ...]]
    seed: int
    overlap_warning: bool = False


def allocate_few_shots(
    pool: list[TrainingExample] | tuple[TrainingExample, ...],
    agent_ids: tuple[str, ...],
    count_per_agent: int,
    seed: int,
) -> FewShotAllocation:
    """Deal few-shot examples to agents from one seeded shuffle.

    When the pool is large enough the agents get disjoint consecutive
    slices, maximizing diversity. Smaller pools fall back to independent
    per-agent sampling without replacement, which may overlap across
    agents; the allocation flags that so callers can warn.
    """
    if not pool:
        raise EmptyPool("no training examples to allocate")
    if count_per_agent < 1:
        raise EmptyPool("count_per_agent must be >= 1")
    rng = random.Random(seed)
    shuffled = list(pool)
    rng.shuffle(shuffled)
    per_agent: dict[str, tuple[TrainingExample, ...]] = {}
    if len(shuffled) >= len(agent_ids) * count_per_agent:
        for i, agent_id in enumerate(agent_ids):
            start = i * count_per_agent
            per_agent[agent_id] = tuple(shuffled[start : start + count_per_agent])
        return FewShotAllocation(per_agent=per_agent, seed=seed, overlap_warning=False)
    take = min(count_per_agent, len(shuffled))
    for agent_id in agent_ids:
        per_agent[agent_id] = tuple(rng.sample(shuffled, take))
    return FewShotAllocation(per_agent=per_agent, seed=seed, overlap_warning=True)


# ---- prompt building ---------------------------------------------------------


@dataclass(frozen=True)
class PromptBundle:
    agent_id: str
    system_prompt: str
    user_prompt: str
    temperature: float
    dropped_candidates: int = 0


def render_few_shot_block(
    examples: tuple[TrainingExample, ...], catalog: Catalog, config: AnnotationConfig
) -> str:
    lines: list[str] = ["Examples:"]
    for i, example in enumerate(examples, start=1):
        lines.append(f"Example {i}:")
        lines.append(f'User Input: "{example.utterance}"')
        lines.append(f"Top {config.annotation_type_plural}:")
        ranked = example.ranked_alternatives
        if not ranked:
            gold = catalog.by_id.get(example.gold_id)
            title = gold.primary_text if gold else example.gold_id
            ranked = ((example.gold_id, 95, "Directly answers the user's need."),)
            lines.append(f'1. "{title}" - Score: 95')
            lines.append(f"   Reasoning: {ranked[0][2]}")
        else:
            for j, (alt_id, score, reasoning) in enumerate(ranked, start=1):
                entry = catalog.by_id.get(alt_id)
                title = entry.primary_text if entry else alt_id
                lines.append(f'{j}. "{title}" - Score: {score}')
                lines.append(f"   Reasoning: {reasoning}")
        lines.append("")
    return "\n".join(lines).rstrip()


def build_ranker_prompt(
    config: AnnotationConfig,
    agent_spec: AgentSpec,
    utterance: str,
    candidates: list[AnnotationEntry],
    few_shots: tuple[TrainingExample, ...] = (),
    catalog: Catalog | None = None,
    expanded_query: str | None = None,
    max_prompt_chars: int | None = None,
) -> PromptBundle:
    """Assemble one ranker prompt.

    Sections in order: task instructions, agent emphasis, few-shot block,
    candidate list, utterance, output format. When the rendered prompt
    would exceed the character budget, candidates are dropped from the tail
    of the retrieval ranking (lowest score first) and the drop is recorded.
    """
    if not candidates:
        raise EmptyCandidates("ranker prompt needs at least one candidate")
    budget = max_prompt_chars or config.max_prompt_chars
    system_prompt = interpolate(BASE_SYSTEM_TEMPLATE, config)
    task = interpolate(RANKER_TASK_TEMPLATE, config)
    emphasis = interpolate(EMPHASIS_TEXT[agent_spec.emphasis], config)
    few_shot_block = (
        render_few_shot_block(few_shots, catalog, config) if few_shots and catalog else ""
    )
    output_format = interpolate(OUTPUT_FORMAT_TEMPLATE, config)

    kept = list(candidates)
    dropped = 0
    while True:
        candidate_lines = [f"Available {config.annotation_type_plural}:"]
        for entry in kept:
            candidate_lines.append(f"[{entry.id}] {entry.primary_text}")
            if agent_spec.uses_secondary and entry.secondary_text:
                label = "Answer" if config.is_faq else (
                    (config.secondary_column or "detail").capitalize()
                )
                candidate_lines.append(f"    {label}: {entry.secondary_text}")
        sections = [task, emphasis]
        if few_shot_block:
            sections.append(few_shot_block)
        sections.append("\n".join(candidate_lines))
        tail = []
        if expanded_query and expanded_query != utterance:
            tail.append(f'Expanded query: "{expanded_query}"')
        tail.append(f'User {config.user_input_label}: "{utterance}"')
        sections.append("\n".join(tail))
        sections.append(output_format)
        user_prompt = "\n\n".join(sections)
        if len(system_prompt) + len(user_prompt) <= budget or len(kept) <= 1:
            return PromptBundle(
                agent_id=agent_spec.agent_id,
                system_prompt=system_prompt,
                user_prompt=user_prompt,
                temperature=agent_spec.temperature,
                dropped_candidates=dropped,
            )
        kept.pop()
        dropped += 1


def build_planner_prompt(
    config: AnnotationConfig, query: str, domain_context: str
) -> tuple[str, str]:
    template = interpolate(PLANNER_USER_TEMPLATE, config)
    user = template.replace("{query}", query).replace("{domain_context}", domain_context)
    user = user.replace("{{", "{").replace("}}", "}")
    return PLANNER_SYSTEM_PROMPT, user


# ---- structured output parsing -----------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)```", re.DOTALL)


def extract_json_dict(raw: str) -> tuple[dict, int]:
    """Recover a JSON object from model text, reporting the stage used.

    Stage 1 parses the whole text. Stage 2 parses the substring between the
    first "{" and the last "}". Stage 3 strips markdown code fences and
    retries the first two stages on the fenced content. First success wins;
    a clean fenced payload therefore resolves at stage 2 already (the brace
    span is the payload), and stage 3 catches fenced output surrounded by
    brace-bearing chatter.
    """
    attempt = _try_json(raw)
    if attempt is not None:
        return attempt, 1
    attempt = _try_brace_span(raw)
    if attempt is not None:
        return attempt, 2
    for block in _FENCE_RE.findall(raw):
        attempt = _try_json(block)
        if attempt is None:
            attempt = _try_brace_span(block)
        if attempt is not None:
            return attempt, 3
    raise UnparseableOutput(f"no JSON object recoverable from {len(raw)} chars of output")


def _try_json(text: str) -> dict | None:
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        return None
    return value if isinstance(value, dict) else None


def _try_brace_span(text: str) -> dict | None:
    start = text.find("{")
    end = text.rfind("}")
    if start == -1 or end <= start:
        return None
    return _try_json(text[start : end + 1])


@dataclass(frozen=True)
class RankedAnnotation:
    annotation: str
    relevance_score: int
    reasoning: str


@dataclass(frozen=True)
class StructuredVerdict:
    user_utterance: str
    intent_analysis: str
    relevant_annotations: tuple[RankedAnnotation, ...]
    confidence: str
    explanation_of_confidence: str = ""


@dataclass(frozen=True)
class ParseOutcome:
    verdict: StructuredVerdict
    stage: int


CONFIDENCE_LEVELS = ("HIGH", "MEDIUM", "LOW")


def parse_structured(raw: str, max_annotations: int = 5) -> ParseOutcome:
    """Parse model output into a validated StructuredVerdict."""
    data, stage = extract_json_dict(raw)
    return ParseOutcome(verdict=validate_verdict(data, max_annotations), stage=stage)


def validate_verdict(data: dict, max_annotations: int = 5) -> StructuredVerdict:
    utterance = _require_str(data, "user_utterance")
    intent = _require_str(data, "intent_analysis")
    raw_annotations = data.get("relevant_annotations")
    if not isinstance(raw_annotations, list) or not raw_annotations:
        raise SchemaViolation("relevant_annotations", "must be a non-empty list")
    if len(raw_annotations) > max_annotations:
        raise SchemaViolation(
            "relevant_annotations", f"at most {max_annotations} entries allowed"
        )
    annotations = []
    for item in raw_annotations:
        if not isinstance(item, dict):
            raise SchemaViolation("relevant_annotations", "entries must be objects")
        title = item.get("annotation")
        if not isinstance(title, str) or not title.strip():
            raise SchemaViolation("annotation", "must be a non-empty string")
        annotations.append(
            RankedAnnotation(
                annotation=title,
                relevance_score=_score_0_100(item.get("relevance_score")),
                reasoning=_optional_str(item, "reasoning"),
            )
        )
    confidence = data.get("confidence")
    if not isinstance(confidence, str) or confidence.upper() not in CONFIDENCE_LEVELS:
        raise SchemaViolation("confidence", "must be HIGH, MEDIUM, or LOW")
    return StructuredVerdict(
        user_utterance=utterance,
        intent_analysis=intent,
        relevant_annotations=tuple(annotations),
        confidence=confidence.upper(),
        explanation_of_confidence=_optional_str(data, "explanation_of_confidence"),
    )


def _require_str(data: dict, field: str) -> str:
    value = data.get(field)
    if not isinstance(value, str):
        raise SchemaViolation(field, "must be a string")
    return value


def _optional_str(data: dict, field: str) -> str:
    value = data.get(field, "")
    if value is None:
        return ""
    if not isinstance(value, str):
        raise SchemaViolation(field, "must be a string")
    return value


def _score_0_100(value) -> int:
    if isinstance(value, bool):
        raise SchemaViolation("relevance_score", "must be an integer")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, int):
        raise SchemaViolation("relevance_score", "must be an integer")
    if not (0 <= value <= 100):
        raise SchemaViolation("relevance_score", f"must be in [0, 100], got {value}")
    return value


def serialize_verdict(verdict: StructuredVerdict) -> str:
    """Canonical JSON for a verdict; parse_structured round-trips it at stage 1."""
    return json.dumps(
        {
            "user_utterance": verdict.user_utterance,
            "intent_analysis": verdict.intent_analysis,
            "relevant_annotations": [
                {
                    "annotation": a.annotation,
                    "relevance_score": a.relevance_score,
                    "reasoning": a.reasoning,
                }
                for a in verdict.relevant_annotations
            ],
            "confidence": verdict.confidence,
            "explanation_of_confidence": verdict.explanation_of_confidence,
        }
    )


def verdict_json_schema() -> dict:
    """JSON-schema document for the verdict wire format."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "StructuredVerdict",
        "type": "object",
        "required": [
            "user_utterance",
            "intent_analysis",
            "relevant_annotations",
            "confidence",
        ],
        "properties": {
            "user_utterance": {"type": "string"},
            "intent_analysis": {"type": "string"},
            "relevant_annotations": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["annotation", "relevance_score", "reasoning"],
                    "properties": {
                        "annotation": {"type": "string", "minLength": 1},
                        "relevance_score": {"type": "integer", "minimum": 0, "maximum": 100},
                        "reasoning": {"type": "string"},
                    },
                },
            },
            "confidence": {"enum": ["HIGH", "MEDIUM", "LOW"]},
            "explanation_of_confidence": {"type": "string"},
        },
    }


# ---- candidate resolution ------------------------------------------------------


@dataclass(frozen=True)
class ResolvedCandidate:
    annotation_id: str
    score: int
    reasoning: str


@dataclass(frozen=True)
class ResolutionResult:
    resolved: tuple[ResolvedCandidate, ...]
    unmatched: tuple[str, ...]


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def _jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def resolve_candidates(verdict: StructuredVerdict, catalog: Catalog) -> ResolutionResult:
    """Map verdict annotation titles back to catalog ids.

    Exact match on normalized primary text wins; otherwise the best token
    Jaccard overlap above 0.8 is accepted (handles trailing punctuation and
    small wording drift); anything else is dropped and reported unmatched.
    A raw catalog id is also accepted in place of a title.
    """
    by_norm: dict[str, str] = {}
    for entry in catalog.entries:
        by_norm.setdefault(_normalize(entry.primary_text), entry.id)
    resolved: list[ResolvedCandidate] = []
    unmatched: list[str] = []
    seen: set[str] = set()
    for item in verdict.relevant_annotations:
        title = item.annotation
        entry_id = by_norm.get(_normalize(title))
        if entry_id is None and title in catalog.by_id:
            entry_id = title
        if entry_id is None:
            tokens = set(tokenize(title))
            best_id, best_overlap = None, 0.0
            for entry in catalog.entries:
                overlap = _jaccard(tokens, set(tokenize(entry.primary_text)))
                if overlap > best_overlap or (
                    overlap == best_overlap and best_id is not None and entry.id < best_id
                ):
                    best_id, best_overlap = entry.id, overlap
            if best_id is not None and best_overlap > 0.8:
                entry_id = best_id
        if entry_id is None:
            unmatched.append(title)
            continue
        if entry_id in seen:
            continue
        seen.add(entry_id)
        resolved.append(
            ResolvedCandidate(annotation_id=entry_id, score=item.relevance_score,
                              reasoning=item.reasoning)
        )
    return ResolutionResult(resolved=tuple(resolved), unmatched=tuple(unmatched))
