import pytest

from labelforge.agents import (
    AgentRun,
    EmptyQuery,
    PlanCache,
    QueryPlan,
    RetrievalContext,
    candidate_pool,
    plan_query,
    run_ranker,
)
from labelforge.clock import ManualClock
from labelforge.config import with_overrides
from labelforge.knowledge_base import AnnotationEntry, Catalog
from labelforge.prompting import DEFAULT_AGENT_SPECS
from labelforge.providers import FaultRule, MockProvider
from labelforge.retrieval import EmbeddingCache, build_bm25_index, build_embedding_index


def spec_by_id(agent_id):
    return next(s for s in DEFAULT_AGENT_SPECS if s.agent_id == agent_id)


def make_ctx(catalog, config, provider, with_embeddings=True):
    ctx = RetrievalContext(catalog=catalog)
    for mode in ("primary_only", "full_context"):
        from labelforge.knowledge_base import embedding_text

        docs = [(e.id, embedding_text(e, mode, config).text) for e in catalog.entries]
        ctx.bm25[mode] = build_bm25_index(docs)
        if with_embeddings:
            ctx.embedding[mode] = build_embedding_index(
                catalog, mode, config.embedding_dims, provider, config
            )
    if with_embeddings:
        ctx.cache = EmbeddingCache()
    return ctx


# ---- planner ---------------------------------------------------------------------


def test_plan_query_expands_known_fixture(config):
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    plan = plan_query("cash back", "banking", config, provider)
    assert plan.needs_expansion
    assert "cash back rewards" in plan.expanded_query
    assert not plan.fallback
    assert not plan.cache_hit


def test_plan_query_rejects_empty(config):
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    with pytest.raises(EmptyQuery):
        plan_query("   ", "banking", config, provider)


def test_plan_query_numeric_is_literal(config):
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    plan = plan_query("10101", "banking", config, provider)
    assert plan.needs_expansion is False
    assert plan.expanded_query == "10101"
    assert provider.complete_calls == 0  # decided without calling the model


def test_plan_query_cache_within_ttl(config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock)
    cache = PlanCache(ttl_s=86400.0, clock=clock)
    first = plan_query("cash back", "banking", config, provider, cache=cache, clock=clock)
    assert provider.complete_calls == 1
    again = plan_query("cash back", "banking", config, provider, cache=cache, clock=clock)
    assert provider.complete_calls == 1  # zero additional calls
    assert again.cache_hit
    assert again.expanded_query == first.expanded_query
    assert cache.hits == 1


def test_plan_query_cache_expires_after_ttl(config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock)
    cache = PlanCache(ttl_s=3600.0, clock=clock)
    plan_query("cash back", "banking", config, provider, cache=cache, clock=clock)
    clock.advance_s(3600.0 + 1.0)
    refreshed = plan_query("cash back", "banking", config, provider, cache=cache, clock=clock)
    assert provider.complete_calls == 2  # exactly one more call
    assert not refreshed.cache_hit


def test_plan_cache_keys_include_domain_context(config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock)
    cache = PlanCache(ttl_s=86400.0, clock=clock)
    plan_query("cash back", "banking", config, provider, cache=cache, clock=clock)
    plan_query("cash back", "telecom", config, provider, cache=cache, clock=clock)
    assert provider.complete_calls == 2
    assert PlanCache.key("q", "a") != PlanCache.key("q", "b")


def test_plan_query_provider_failure_falls_back(config):
    clock = ManualClock(0.0)
    provider = MockProvider(
        seed=0, clock=clock,
        fault_rules=[FaultRule(match="planning retrieval strategies", fail="fatal")],
    )
    plan = plan_query("cash back", "banking", config, provider, clock=clock)
    assert plan.fallback
    assert plan.needs_expansion is False
    assert plan.expanded_query == "cash back"
    assert "planner unavailable" in plan.reasoning


def test_plan_query_timeout_falls_back(config):
    clock = ManualClock(0.0)
    provider = MockProvider(
        seed=0, clock=clock,
        fault_rules=[FaultRule(match="planning retrieval strategies", fail="timeout")],
    )
    plan = plan_query("cash back", "banking", config, provider, clock=clock)
    assert plan.fallback


def test_plan_query_retries_transient_failures(config):
    clock = ManualClock(0.0)
    provider = MockProvider(
        seed=0, clock=clock,
        fault_rules=[FaultRule(match="planning retrieval strategies",
                               fail="provider", times=2)],
    )
    plan = plan_query("cash back", "banking", config, provider, clock=clock)
    assert not plan.fallback  # retried through the transient errors
    assert provider.complete_calls == 3


def test_plan_query_garbage_output_falls_back(config):
    clock = ManualClock(0.0)

    class GarbagePlanner(MockProvider):
        def _render_plan(self, request):
            return "no json at all"

    plan = plan_query("cash back", "banking", config, GarbagePlanner(seed=0, clock=clock),
                      clock=clock)
    assert plan.fallback


def test_plan_query_lints_off_query_expansions(config):
    clock = ManualClock(0.0)

    class DriftingPlanner(MockProvider):
        def _render_plan(self, request):
            return ('{"intent": "x", "needs_expansion": true, '
                    '"expanded_query": "weather forecast tomorrow", "reasoning": "?"}')

    plan = plan_query("cash back", "banking", config, DriftingPlanner(seed=0, clock=clock),
                      clock=clock)
    assert plan.fallback
    assert plan.expanded_query == "cash back"


def test_plan_query_no_expansion_preserves_query_verbatim(config):
    clock = ManualClock(0.0)

    class RewritingPlanner(MockProvider):
        def _render_plan(self, request):
            return ('{"intent": "x", "needs_expansion": false, '
                    '"expanded_query": "something else", "reasoning": "r"}')

    plan = plan_query("cash back", "banking", config,
                      RewritingPlanner(seed=0, clock=clock), clock=clock)
    assert not plan.fallback
    assert plan.expanded_query == "cash back"


def test_plan_cache_capacity_pressure_valve(config):
    clock = ManualClock(0.0)
    cache = PlanCache(ttl_s=1000.0, clock=clock, capacity=2)
    plan = QueryPlan("q", "i", False, "q", "r")
    cache.put("a", "ctx", plan)
    cache.put("b", "ctx", plan)
    cache.put("c", "ctx", plan)  # clears, then stores
    assert cache.get("c", "ctx") is not None
    assert cache.get("a", "ctx") is None


# ---- candidate pools ------------------------------------------------------------


def literal_plan(query):
    return QueryPlan(original_query=query, intent="", needs_expansion=False,
                     expanded_query=query, reasoning="")


def test_pool_small_catalog_full_for_lexical_agents(catalog, config):
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    pool = candidate_pool(spec_by_id("primary_no_emb"), literal_plan("lost deb"),
                          ctx, config, provider)
    assert pool == [e.id for e in catalog.entries]


def test_pool_large_catalog_pruned_by_bm25(config):
    entries = tuple(
        AnnotationEntry(id=f"e-{i:04d}", primary_text=f"topic {i} about subject {i % 7}")
        for i in range(300)
    )
    big = Catalog(entries=entries, by_id={e.id: e for e in entries}, source_digest="d")
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    ctx = make_ctx(big, config, provider, with_embeddings=False)
    pool = candidate_pool(spec_by_id("primary_no_emb"), literal_plan("topic 5"),
                          ctx, config, provider)
    assert len(pool) == config.retrieval_top_k
    assert "e-0005" in pool[:3]


def test_pool_embedding_agents_use_knn(catalog, config):
    small = with_overrides(config, embedding_dims=64, retrieval_top_k=3)
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    ctx = make_ctx(catalog, small, provider)
    pool = candidate_pool(spec_by_id("primary_emb"), literal_plan("lost card"),
                          ctx, small, provider)
    assert len(pool) == 3
    assert set(pool) <= {e.id for e in catalog.entries}


def test_pool_embedding_queries_go_through_cache(catalog, config):
    small = with_overrides(config, embedding_dims=64)
    provider = MockProvider(seed=0, clock=ManualClock(0.0))
    ctx = make_ctx(catalog, small, provider)
    calls_before = provider.embed_calls
    for _ in range(3):
        candidate_pool(spec_by_id("primary_emb"), literal_plan("lost card"),
                       ctx, small, provider)
    assert provider.embed_calls == calls_before + 1  # two cache hits
    assert ctx.cache.hits == 2


# ---- run_ranker -------------------------------------------------------------------


def test_run_ranker_ok(catalog, config, training):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock)
    small = with_overrides(config, embedding_dims=64)
    ctx = make_ctx(catalog, small, provider)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lock my debit cards"),
                     ctx, small, provider, few_shots=tuple(training[:2]), clock=clock)
    assert run.status == "ok"
    assert run.parse_stage == 1
    assert run.pool_size == len(catalog)
    assert run.resolved[0].annotation_id == "faq-001"
    assert run.unmatched == ()


def test_run_ranker_timeout_status(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(
        seed=0, clock=clock,
        fault_rules=[FaultRule(match="prioritize exact and near-exact", fail="timeout")],
    )
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lost deb"),
                     ctx, config, provider, clock=clock)
    assert run.status == "timeout"
    assert run.resolved == ()
    assert "Timeout" in run.error


def test_run_ranker_provider_error_status_after_retries(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(
        seed=0, clock=clock,
        fault_rules=[FaultRule(match="prioritize exact and near-exact", fail="provider")],
    )
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lost deb"),
                     ctx, config, provider, clock=clock)
    assert run.status == "provider_error"
    assert provider.complete_calls == config.max_retries + 1


def test_run_ranker_parse_error_status(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock, corruption="garbage")
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lost deb"),
                     ctx, config, provider, clock=clock)
    assert run.status == "parse_error"


def test_run_ranker_recovers_chatty_output_stage_2(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock, corruption="chatty")
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lock my debit cards"),
                     ctx, config, provider, clock=clock)
    assert run.status == "ok"
    assert run.parse_stage == 2
    assert run.resolved[0].annotation_id == "faq-001"


def test_run_ranker_recovers_fenced_output_stage_3(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock, corruption="fenced")
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lock my debit cards"),
                     ctx, config, provider, clock=clock)
    assert run.status == "ok"
    assert run.parse_stage == 3


def test_run_ranker_uses_expansion_only_when_flagged(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock)
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    plan = QueryPlan(original_query="lost deb", intent="", needs_expansion=True,
                     expanded_query="lost debit card, stolen card, lock card",
                     reasoning="")
    run = run_ranker(spec_by_id("primary_no_emb"), plan, ctx, config, provider,
                     clock=clock)
    # expansion tokens steer the mock toward the card-lock entry
    assert run.resolved[0].annotation_id == "faq-001"


def test_agent_run_latency_measured(catalog, config):
    clock = ManualClock(0.0)
    provider = MockProvider(
        seed=0, clock=clock,
        fault_rules=[FaultRule(match="prioritize exact and near-exact", delay_ms=120)],
    )
    ctx = make_ctx(catalog, config, provider, with_embeddings=False)
    run = run_ranker(spec_by_id("primary_no_emb"), literal_plan("lost deb"),
                     ctx, config, provider, clock=clock)
    assert run.status == "ok"
    assert run.latency_ms == 120.0


def test_agent_run_defaults():
    run = AgentRun(agent_id="x", status="timeout")
    assert run.resolved == ()
    assert run.verdict is None
