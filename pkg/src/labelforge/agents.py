"""Query planning and ranker-agent execution.

The planner is a cheap pre-processing agent: it decides whether a terse or
abbreviated query needs expansion before retrieval, and its answers are
cached under a TTL because production traffic repeats. Planner failures
never fail the pipeline — the fallback is simply "no expansion".

Rankers are the four specialized annotation agents. Each builds its own
candidate pool (lexical or embedding retrieval over primary-only or
full-content views), renders its prompt, calls the provider, and parses
the structured verdict. A ranker failure is recorded as a status, never
raised, so one bad agent degrades the request instead of killing it.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass, field, replace

from .clock import SYSTEM_CLOCK, Clock
from .config import AnnotationConfig
from .errors import LabelForgeError
from .knowledge_base import Catalog
from .prompting import (
    AgentSpec,
    PromptBundle,
    ResolvedCandidate,
    StructuredVerdict,
    build_planner_prompt,
    build_ranker_prompt,
    extract_json_dict,
    parse_structured,
    resolve_candidates,
)
from .providers import (
    ChatRequest,
    EmbeddingRequest,
    FatalProviderError,
    ModelProvider,
    ProviderError,
    Timeout,
    with_retry,
)
from .retrieval import (
    Bm25Index,
    EmbeddingCache,
    EmbeddingIndex,
    bm25_topk,
    cached_embed,
    knn,
)


class EmptyQuery(LabelForgeError):
    pass


@dataclass(frozen=True)
class QueryPlan:
    original_query: str
    intent: str
    needs_expansion: bool
    expanded_query: str
    reasoning: str
    cache_hit: bool = False
    fallback: bool = False


class PlanCache:
    """TTL cache for query plans, keyed by MD5 of query and context."""

    def __init__(self, ttl_s: float, clock: Clock = SYSTEM_CLOCK, capacity: int = 65536):
        self.ttl_s = ttl_s
        self._clock = clock
        self._store: dict[str, tuple[float, QueryPlan]] = {}
        self._lock = threading.Lock()
        self._capacity = capacity
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(query: str, domain_context: str) -> str:
        return hashlib.md5(f"{query}\x1f{domain_context}".encode()).hexdigest()

    def get(self, query: str, domain_context: str) -> QueryPlan | None:
        digest = self.key(query, domain_context)
        now = self._clock.now_s()
        with self._lock:
            hit = self._store.get(digest)
            if hit is not None and now < hit[0]:
                self.hits += 1
                return hit[1]
            if hit is not None:
                del self._store[digest]
            self.misses += 1
            return None

    def put(self, query: str, domain_context: str, plan: QueryPlan) -> None:
        digest = self.key(query, domain_context)
        with self._lock:
            if len(self._store) >= self._capacity:
                self._store.clear()  # desk-scale pressure valve; TTL does the real eviction
            self._store[digest] = (self._clock.now_s() + self.ttl_s, plan)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


_ALPHA_RE = re.compile(r"[a-zA-Z]")


def _content_tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.lower()))


def plan_query(
    query: str,
    domain_context: str,
    config: AnnotationConfig,
    provider: ModelProvider,
    cache: PlanCache | None = None,
    clock: Clock = SYSTEM_CLOCK,
) -> QueryPlan:
    """Produce a retrieval plan for the query, consulting the TTL cache first.

    Ambiguous-but-literal queries (no alphabetic content, e.g. numeric
    codes) are never expanded. Any planner failure — provider error,
    timeout, or unparseable output — degrades to a flagged no-expansion
    plan. A lint also rejects expansions that share zero content tokens
    with the original query, since those would retrieve for a different
    question entirely.
    """
    stripped = query.strip()
    if not stripped:
        raise EmptyQuery("query must be non-empty")
    if cache is not None:
        cached = cache.get(query, domain_context)
        if cached is not None:
            return replace(cached, cache_hit=True)

    if not _ALPHA_RE.search(stripped):
        plan = QueryPlan(
            original_query=query,
            intent="literal identifier lookup",
            needs_expansion=False,
            expanded_query=query,
            reasoning="Query has no alphabetic content; preserved as-is.",
        )
        if cache is not None:
            cache.put(query, domain_context, plan)
        return plan

    system_prompt, user_prompt = build_planner_prompt(config, query, domain_context)
    request = ChatRequest(
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        temperature=0.1,
        deadline_ms=config.agent_timeout_ms,
    )
    plan = None
    try:
        response = with_retry(
            lambda: provider.complete(request), config.max_retries, clock=clock
        )
        data, _stage = extract_json_dict(response.text)
        plan = _validate_plan(query, data)
    except (LabelForgeError, Timeout, ProviderError, FatalProviderError):
        plan = None
    if plan is not None and plan.needs_expansion:
        overlap = _content_tokens(plan.expanded_query) & _content_tokens(query)
        if not overlap:
            plan = None  # expansion drifted off-query; fall back below
    if plan is None:
        plan = QueryPlan(
            original_query=query,
            intent="",
            needs_expansion=False,
            expanded_query=query,
            reasoning="planner unavailable; proceeding without expansion",
            fallback=True,
        )
    if cache is not None:
        cache.put(query, domain_context, plan)
    return plan


def _validate_plan(query: str, data: dict) -> QueryPlan | None:
    intent = data.get("intent")
    needs = data.get("needs_expansion")
    expanded = data.get("expanded_query")
    reasoning = data.get("reasoning", "")
    if not isinstance(intent, str) or not isinstance(needs, bool):
        return None
    if not isinstance(expanded, str) or not expanded.strip():
        return None
    if not needs:
        expanded = query  # a no-expansion plan must preserve the query verbatim
    return QueryPlan(
        original_query=query,
        intent=intent,
        needs_expansion=needs,
        expanded_query=expanded,
        reasoning=reasoning if isinstance(reasoning, str) else "",
    )


# ---- ranker execution ----------------------------------------------------------


@dataclass
class AgentRun:
    agent_id: str
    status: str  # ok | timeout | provider_error | parse_error
    resolved: tuple[ResolvedCandidate, ...] = ()
    verdict: StructuredVerdict | None = None
    parse_stage: int | None = None
    unmatched: tuple[str, ...] = ()
    dropped_candidates: int = 0
    pool_size: int = 0
    latency_ms: float = 0.0
    error: str = ""


@dataclass
class RetrievalContext:
    """Per-mode retrieval structures shared by the agents of one engine."""

    catalog: Catalog
    bm25: dict[str, Bm25Index] = field(default_factory=dict)
    embedding: dict[str, EmbeddingIndex] = field(default_factory=dict)
    cache: EmbeddingCache | None = None
    # catalogs at or below this size skip lexical pruning for non-embedding
    # agents and put the whole catalog in the prompt
    full_catalog_limit: int = 200


def _mode_for(spec: AgentSpec) -> str:
    return "full_context" if spec.uses_secondary else "primary_only"


def candidate_pool(
    spec: AgentSpec,
    plan: QueryPlan,
    ctx: RetrievalContext,
    config: AnnotationConfig,
    provider: ModelProvider,
) -> list[str]:
    """Ids of the candidates this agent will rank, best-first."""
    mode = _mode_for(spec)
    if spec.uses_embeddings:
        index = ctx.embedding[mode]
        cache = ctx.cache
        if cache is not None:
            query_vec = cached_embed(cache, plan.expanded_query, index.dims, provider)
        else:
            query_vec = provider.embed(
                EmbeddingRequest(texts=(plan.expanded_query,), target_dims=index.dims)
            )[0]
        return [key for key, _score in knn(index, query_vec, config.retrieval_top_k)]
    if len(ctx.catalog) <= ctx.full_catalog_limit:
        return [entry.id for entry in ctx.catalog.entries]
    return [key for key, _score in bm25_topk(ctx.bm25[mode], plan.expanded_query,
                                             config.retrieval_top_k)]


def run_ranker(
    spec: AgentSpec,
    plan: QueryPlan,
    ctx: RetrievalContext,
    config: AnnotationConfig,
    provider: ModelProvider,
    few_shots: tuple = (),
    clock: Clock = SYSTEM_CLOCK,
) -> AgentRun:
    """Execute one ranker agent end to end; failures become statuses."""
    started = clock.monotonic_ms()
    try:
        pool_ids = candidate_pool(spec, plan, ctx, config, provider)
        candidates = [ctx.catalog.by_id[c] for c in pool_ids]
        bundle: PromptBundle = build_ranker_prompt(
            config,
            spec,
            plan.original_query,
            candidates,
            few_shots=few_shots,
            catalog=ctx.catalog,
            expanded_query=plan.expanded_query if plan.needs_expansion else None,
        )
        request = ChatRequest(
            system_prompt=bundle.system_prompt,
            user_prompt=bundle.user_prompt,
            temperature=bundle.temperature,
            deadline_ms=config.agent_timeout_ms,
        )
        response = with_retry(
            lambda: provider.complete(request), config.max_retries, clock=clock
        )
        outcome = parse_structured(response.text, max_annotations=config.top_n_results)
        resolution = resolve_candidates(outcome.verdict, ctx.catalog)
        return AgentRun(
            agent_id=spec.agent_id,
            status="ok",
            resolved=resolution.resolved,
            verdict=outcome.verdict,
            parse_stage=outcome.stage,
            unmatched=resolution.unmatched,
            dropped_candidates=bundle.dropped_candidates,
            pool_size=len(candidates),
            latency_ms=clock.monotonic_ms() - started,
        )
    except Timeout as exc:
        return _failed(spec, "timeout", exc, started, clock)
    except (ProviderError, FatalProviderError) as exc:
        return _failed(spec, "provider_error", exc, started, clock)
    except LabelForgeError as exc:
        return _failed(spec, "parse_error", exc, started, clock)


def _failed(spec: AgentSpec, status: str, exc: Exception, started: float,
            clock: Clock) -> AgentRun:
    return AgentRun(
        agent_id=spec.agent_id,
        status=status,
        latency_ms=clock.monotonic_ms() - started,
        error=f"{type(exc).__name__}: {exc}",
    )
