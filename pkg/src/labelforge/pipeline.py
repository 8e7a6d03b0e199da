"""The annotation engine: planner, parallel rankers, judge, routing.

One request flows planner -> four concurrent rankers -> aggregate -> judge
-> confidence routing. Agents run on a shared thread pool so wall clock
tracks the slowest agent, not the sum. A request degrades (never fails)
while at least one agent produces a usable verdict; only a total wipeout
raises AllAgentsFailed.
"""

from __future__ import annotations

import json
import math
import threading
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .agents import (
    AgentRun,
    PlanCache,
    QueryPlan,
    RetrievalContext,
    plan_query,
    run_ranker,
)
from .clock import SYSTEM_CLOCK, Clock
from .config import AnnotationConfig, ConfidenceThresholds
from .errors import LabelForgeError, ParseError, ValidationError
from .judge import (
    AgentWeights,
    JudgeResult,
    NoUsableRuns,
    aggregate,
    fallback_rank,
    judge_rerank,
)
from .knowledge_base import Catalog, TrainingExample, embedding_text
from .prompting import (
    AGENT_IDS,
    DEFAULT_AGENT_SPECS,
    AgentSpec,
    EmptyPool,
    FewShotAllocation,
    allocate_few_shots,
)
from .providers import ModelProvider
from .retrieval import (
    EmbeddingCache,
    build_bm25_index,
    build_embedding_index,
)


class AllAgentsFailed(LabelForgeError):
    """Every ranker failed; statuses say how each one died."""

    def __init__(self, statuses: dict[str, str]):
        self.statuses = dict(statuses)
        detail = ", ".join(f"{a}={s}" for a, s in sorted(statuses.items()))
        super().__init__(f"all agents failed: {detail}")


class EmptyRanking(LabelForgeError):
    pass


class UnknownJob(LabelForgeError):
    pass


BAND_ACTIONS = {
    "HIGH": "auto_accept",
    "MEDIUM": "auto_accept_flagged",
    "LOW": "human_review",
}


@dataclass(frozen=True)
class RoutingDecision:
    band: str
    action: str


def route(judge: JudgeResult, thresholds: ConfidenceThresholds) -> RoutingDecision:
    """Map a final ranking to a confidence band and downstream action.

    HIGH requires both a top score at or above the high threshold and at
    least two agents behind the top candidate — a lone agent can be loudly
    wrong, so single-agent results cap out at MEDIUM.
    """
    if not judge.ranked:
        raise EmptyRanking("cannot route an empty ranking")
    top = judge.ranked[0]
    if top.final_score >= thresholds.high and top.support >= 2:
        band = "HIGH"
    elif top.final_score >= thresholds.medium:
        band = "MEDIUM"
    else:
        band = "LOW"
    return RoutingDecision(band=band, action=BAND_ACTIONS[band])


@dataclass
class AnnotationResult:
    utterance_id: str
    utterance: str
    plan: QueryPlan
    runs: list[AgentRun]
    judge: JudgeResult
    routing: RoutingDecision
    total_latency_ms: float
    degraded: bool

    def top(self) -> list[dict]:
        return [
            {
                "annotation_id": c.annotation_id,
                "final_score": c.final_score,
                "support": c.support,
                "reasoning": c.reasoning,
            }
            for c in self.judge.ranked
        ]


# ---- monitoring ---------------------------------------------------------------


@dataclass(frozen=True)
class MonitoringSnapshot:
    empty: bool
    requests: int
    latency_p50_ms: float
    latency_p95_ms: float
    latency_p99_ms: float
    band_fractions: dict[str, float]
    judge_fallback_rate: float
    degraded_rate: float
    plan_cache_hit_rate: float
    embedding_cache_hit_rate: float

    def to_dict(self) -> dict:
        return {
            "empty": self.empty,
            "requests": self.requests,
            "latency_ms": {
                "p50": self.latency_p50_ms,
                "p95": self.latency_p95_ms,
                "p99": self.latency_p99_ms,
            },
            "band_fractions": dict(self.band_fractions),
            "judge_fallback_rate": self.judge_fallback_rate,
            "degraded_rate": self.degraded_rate,
            "plan_cache_hit_rate": self.plan_cache_hit_rate,
            "embedding_cache_hit_rate": self.embedding_cache_hit_rate,
        }


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not sorted_values:
        return 0.0
    rank = math.ceil(percentile / 100.0 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


@dataclass
class _RequestRecord:
    latency_ms: float
    band: str
    source: str
    degraded: bool


class MetricsWindow:
    """Bounded ring of recent request records, summarized on demand."""

    def __init__(self, capacity: int = 10000):
        self._records: deque[_RequestRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def add(self, latency_ms: float, band: str, source: str, degraded: bool) -> None:
        with self._lock:
            self._records.append(_RequestRecord(latency_ms, band, source, degraded))

    def snapshot(
        self,
        last_n: int | None = None,
        plan_cache_hit_rate: float = 0.0,
        embedding_cache_hit_rate: float = 0.0,
    ) -> MonitoringSnapshot:
        with self._lock:
            records = list(self._records)
        if last_n is not None:
            records = records[-last_n:]
        if not records:
            return MonitoringSnapshot(
                empty=True,
                requests=0,
                latency_p50_ms=0.0,
                latency_p95_ms=0.0,
                latency_p99_ms=0.0,
                band_fractions={"HIGH": 0.0, "MEDIUM": 0.0, "LOW": 0.0},
                judge_fallback_rate=0.0,
                degraded_rate=0.0,
                plan_cache_hit_rate=plan_cache_hit_rate,
                embedding_cache_hit_rate=embedding_cache_hit_rate,
            )
        latencies = sorted(r.latency_ms for r in records)
        n = len(records)
        bands = {
            band: sum(1 for r in records if r.band == band) / n
            for band in ("HIGH", "MEDIUM", "LOW")
        }
        return MonitoringSnapshot(
            empty=False,
            requests=n,
            latency_p50_ms=nearest_rank(latencies, 50),
            latency_p95_ms=nearest_rank(latencies, 95),
            latency_p99_ms=nearest_rank(latencies, 99),
            band_fractions=bands,
            judge_fallback_rate=sum(1 for r in records if r.source == "fallback_aggregation")
            / n,
            degraded_rate=sum(1 for r in records if r.degraded) / n,
            plan_cache_hit_rate=plan_cache_hit_rate,
            embedding_cache_hit_rate=embedding_cache_hit_rate,
        )


# ---- batch ---------------------------------------------------------------------

BATCH_WINDOW_S = 86400.0  # jobs get one day to finish before expiring


@dataclass
class BatchGroup:
    index: int
    items: list[tuple[str, str]]  # (item id, utterance)
    status: str = "queued"  # queued | running | done | expired
    completed: int = 0


@dataclass
class BatchJob:
    job_id: str
    created_s: float
    window_deadline_s: float
    groups: list[BatchGroup]
    output_path: str
    status: str = "queued"  # queued | running | complete | expired_partial

    @property
    def total_items(self) -> int:
        return sum(len(g.items) for g in self.groups)

    @property
    def completed_items(self) -> int:
        return sum(g.completed for g in self.groups)

    def pending_ids(self) -> list[str]:
        out: list[str] = []
        for group in self.groups:
            if group.status != "done":
                out.extend(item_id for item_id, _ in group.items[group.completed :])
        return out

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "status": self.status,
            "created_s": self.created_s,
            "window_deadline_s": self.window_deadline_s,
            "total_items": self.total_items,
            "completed_items": self.completed_items,
            "groups": [
                {"index": g.index, "size": len(g.items), "status": g.status,
                 "completed": g.completed}
                for g in self.groups
            ],
            "pending_ids": self.pending_ids(),
            "output_path": self.output_path,
        }


# ---- engine --------------------------------------------------------------------


@dataclass
class EngineOptions:
    """Pipeline-shape switches, mostly for evaluation ablations."""

    use_planner: bool = True
    use_judge: bool = True
    agent_ids: tuple[str, ...] = AGENT_IDS
    shared_few_shots: bool = False
    domain_context: str = "general customer support"


class AnnotationEngine:
    """Wires the full pipeline over one catalog and one provider."""

    def __init__(
        self,
        config: AnnotationConfig,
        catalog: Catalog,
        provider: ModelProvider,
        training: list[TrainingExample] | tuple[TrainingExample, ...] = (),
        clock: Clock = SYSTEM_CLOCK,
        seed: int = 0,
        options: EngineOptions | None = None,
        rules=(),
        weights: AgentWeights | None = None,
    ):
        if len(catalog) == 0:
            raise ValidationError("catalog", "must contain at least one entry")
        self.config = config
        self.catalog = catalog
        self.provider = provider
        self.clock = clock
        self.seed = seed
        self.options = options or EngineOptions()
        self.rules = tuple(rules)
        self.specs: list[AgentSpec] = [
            spec for spec in DEFAULT_AGENT_SPECS if spec.agent_id in self.options.agent_ids
        ]
        if not self.specs:
            raise ValidationError("agent_ids", "no known agents selected")

        self.weights = weights or AgentWeights(tuple(s.agent_id for s in self.specs))
        self.plan_cache = PlanCache(ttl_s=config.planner_cache_ttl_s, clock=clock)
        self.metrics = MetricsWindow()
        self._top_records: deque[tuple[int, int]] = deque(maxlen=10000)
        self._executor = ThreadPoolExecutor(max_workers=config.worker_count)
        self._request_seq = 0
        self._jobs: dict[str, BatchJob] = {}
        self._jobs_lock = threading.Lock()

        self.retrieval = RetrievalContext(catalog=catalog)
        modes = {("full_context" if s.uses_secondary else "primary_only") for s in self.specs}
        for mode in modes:
            docs = [
                (entry.id, embedding_text(entry, mode, config).text)
                for entry in catalog.entries
            ]
            self.retrieval.bm25[mode] = build_bm25_index(docs)
        if config.enable_embeddings and any(s.uses_embeddings for s in self.specs):
            self.retrieval.cache = EmbeddingCache()
            for mode in {
                ("full_context" if s.uses_secondary else "primary_only")
                for s in self.specs
                if s.uses_embeddings
            }:
                self.retrieval.embedding[mode] = build_embedding_index(
                    catalog, mode, config.embedding_dims, provider, config
                )
        else:
            # embeddings off: embedding agents fall back to lexical pools
            self.specs = [
                AgentSpec(s.agent_id, False, s.uses_secondary, s.emphasis, s.temperature)
                for s in self.specs
            ]
            for mode in {
                ("full_context" if s.uses_secondary else "primary_only") for s in self.specs
            }:
                if mode not in self.retrieval.bm25:
                    docs = [
                        (entry.id, embedding_text(entry, mode, config).text)
                        for entry in catalog.entries
                    ]
                    self.retrieval.bm25[mode] = build_bm25_index(docs)

        self.few_shots: FewShotAllocation | None = None
        if training:
            agent_ids = tuple(s.agent_id for s in self.specs)
            if self.options.shared_few_shots:
                base = allocate_few_shots(
                    list(training), ("shared",), config.few_shot_count_per_agent, seed
                )
                shared = base.per_agent["shared"]
                self.few_shots = FewShotAllocation(
                    per_agent={a: shared for a in agent_ids}, seed=seed,
                    overlap_warning=True,
                )
            else:
                try:
                    self.few_shots = allocate_few_shots(
                        list(training), agent_ids, config.few_shot_count_per_agent, seed
                    )
                except EmptyPool:
                    self.few_shots = None

    # ---- single request ---------------------------------------------------

    def annotate(self, utterance: str, context: str = "",
                 utterance_id: str | None = None) -> AnnotationResult:
        started = self.clock.monotonic_ms()
        with self._jobs_lock:
            self._request_seq += 1
            seq = self._request_seq
        utt_id = utterance_id or f"utt-{seq:06d}"

        domain_context = context or self.options.domain_context
        if self.options.use_planner:
            plan = plan_query(
                utterance, domain_context, self.config, self.provider,
                cache=self.plan_cache, clock=self.clock,
            )
        else:
            plan = QueryPlan(
                original_query=utterance,
                intent="",
                needs_expansion=False,
                expanded_query=utterance,
                reasoning="planner disabled",
            )

        futures = [
            self._executor.submit(
                run_ranker,
                spec,
                plan,
                self.retrieval,
                self.config,
                self.provider,
                self.few_shots.per_agent.get(spec.agent_id, ()) if self.few_shots else (),
                self.clock,
            )
            for spec in self.specs
        ]
        # run_ranker never raises and the provider enforces deadlines; the
        # generous real-time bound here is a backstop against a hung worker.
        backstop_s = (self.config.agent_timeout_ms * (self.config.max_retries + 2)) / 1000 + 30
        runs: list[AgentRun] = []
        for spec, future in zip(self.specs, futures):
            try:
                runs.append(future.result(timeout=backstop_s))
            except Exception:  # pragma: no cover - backstop only
                runs.append(AgentRun(agent_id=spec.agent_id, status="timeout",
                                     error="worker backstop timeout"))

        usable = [r for r in runs if r.status == "ok"]
        if not usable:
            raise AllAgentsFailed({r.agent_id: r.status for r in runs})
        degraded = any(r.status != "ok" for r in runs)

        aggs = aggregate(runs)
        if not aggs or all(not agg.per_agent_scores for agg in aggs):
            raise AllAgentsFailed({r.agent_id: r.status for r in runs})
        if self.options.use_judge:
            judge_result = judge_rerank(
                plan, aggs, runs, self.config, self.provider, self.weights,
                self.catalog, clock=self.clock, rules=self.rules,
            )
        else:
            judge_result = fallback_rank(
                aggs, self.weights, self.config.top_n_results, rules=self.rules
            )
        routing = route(judge_result, self.config.confidence_thresholds)
        total = self.clock.monotonic_ms() - started
        self.metrics.add(total, routing.band, judge_result.source, degraded)
        if judge_result.ranked:
            top = judge_result.ranked[0]
            with self._jobs_lock:
                self._top_records.append((top.final_score, top.support))
        return AnnotationResult(
            utterance_id=utt_id,
            utterance=utterance,
            plan=plan,
            runs=runs,
            judge=judge_result,
            routing=routing,
            total_latency_ms=total,
            degraded=degraded,
        )

    # ---- monitoring ---------------------------------------------------------

    def stats(self, last_n: int | None = None) -> MonitoringSnapshot:
        emb_rate = self.retrieval.cache.hit_rate if self.retrieval.cache else 0.0
        return self.metrics.snapshot(
            last_n=last_n,
            plan_cache_hit_rate=self.plan_cache.hit_rate,
            embedding_cache_hit_rate=emb_rate,
        )

    def propose_thresholds(
        self, target: tuple[float, float, float] = (0.85, 0.10, 0.05)
    ) -> ConfidenceThresholds:
        """Suggest thresholds that would hit a target band distribution.

        Scans candidate cutoffs over recent top scores and picks the pair
        minimizing distance to the target (HIGH, MEDIUM, LOW) fractions.
        """
        with self._jobs_lock:
            records = list(self._top_records)
        if not records:
            return self.config.confidence_thresholds
        total = len(records)
        best = self.config.confidence_thresholds
        best_err = float("inf")
        for high in range(1, 101):
            n_high = sum(1 for s, sup in records if s >= high and sup >= 2)
            for medium in range(0, high):
                n_medium = sum(
                    1 for s, sup in records if s >= medium and not (s >= high and sup >= 2)
                )
                f_high = n_high / total
                f_medium = n_medium / total
                f_low = 1.0 - f_high - f_medium
                err = (
                    (f_high - target[0]) ** 2
                    + (f_medium - target[1]) ** 2
                    + (f_low - target[2]) ** 2
                )
                if err < best_err - 1e-12:
                    best_err = err
                    best = ConfidenceThresholds(high=high, medium=medium)
        return best

    # ---- batch ----------------------------------------------------------------

    def submit_batch(
        self,
        input_path: str | Path,
        out_dir: str | Path,
        start: bool = True,
        window_s: float = BATCH_WINDOW_S,
    ) -> BatchJob:
        """Split a JSONL file of {"id", "utterance"} items into capped groups.

        Groups are processed in order inside the job's completion window;
        whatever is still pending when the window closes is reported, not
        silently dropped.
        """
        items = self._read_batch_items(Path(input_path))
        job_id = uuid.uuid4().hex[:12]
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        size = self.config.batch_size
        groups = [
            BatchGroup(index=i, items=items[start_i : start_i + size])
            for i, start_i in enumerate(range(0, len(items), size))
        ]
        now = self.clock.now_s()
        job = BatchJob(
            job_id=job_id,
            created_s=now,
            window_deadline_s=now + window_s,
            groups=groups,
            output_path=str(out / f"batch-{job_id}.jsonl"),
        )
        with self._jobs_lock:
            self._jobs[job_id] = job
        if start:
            thread = threading.Thread(target=self.process_batch, args=(job_id,), daemon=True)
            thread.start()
        return job

    @staticmethod
    def _read_batch_items(path: Path) -> list[tuple[str, str]]:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        items: list[tuple[str, str]] = []
        seen: set[str] = set()
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {line_no}: invalid JSON ({exc})") from exc
            item_id = str(obj.get("id", "")).strip()
            utterance = str(obj.get("utterance", "")).strip()
            if not item_id or not utterance:
                raise ValidationError("id", f"line {line_no}: needs id and utterance")
            if item_id in seen:
                raise ValidationError("id", f"line {line_no}: duplicate id {item_id!r}")
            seen.add(item_id)
            items.append((item_id, utterance))
        if not items:
            raise ValidationError("items", "batch input is empty")
        return items

    def process_batch(self, job_id: str) -> BatchJob:
        """Drive a job to completion or window expiry (synchronously)."""
        while self.process_next_group(job_id):
            pass
        return self.poll_batch(job_id)

    def process_next_group(self, job_id: str) -> bool:
        """Process one pending group; False when nothing is left to do."""
        with self._jobs_lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        if self.clock.now_s() >= job.window_deadline_s:
            return False
        # Claim under the lock so concurrent callers never grab the same group.
        with self._jobs_lock:
            group = next((g for g in job.groups if g.status == "queued"), None)
            if group is None:
                return False
            group.status = "running"
            job.status = "running"
        with open(job.output_path, "a", encoding="utf-8") as fh:
            for item_id, utterance in group.items[group.completed :]:
                fh.write(json.dumps(self._batch_line(item_id, utterance),
                                    sort_keys=True) + "\n")
                group.completed += 1
        group.status = "done"
        return any(g.status == "queued" for g in job.groups)

    def _batch_line(self, item_id: str, utterance: str) -> dict:
        try:
            result = self.annotate(utterance, utterance_id=item_id)
        except AllAgentsFailed:
            return {
                "id": item_id,
                "top": [],
                "band": "LOW",
                "action": "human_review",
                "degraded": True,
                "error": "all_agents_failed",
            }
        return {
            "id": item_id,
            "top": [
                {"annotation_id": c.annotation_id, "final_score": c.final_score}
                for c in result.judge.ranked
            ],
            "band": result.routing.band,
            "action": result.routing.action,
            "degraded": result.degraded,
        }

    def poll_batch(self, job_id: str) -> BatchJob:
        with self._jobs_lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        if all(g.status == "done" for g in job.groups):
            job.status = "complete"
        elif self.clock.now_s() >= job.window_deadline_s:
            for group in job.groups:
                if group.status in ("queued", "running"):
                    group.status = "expired"
            job.status = "expired_partial"
        elif any(g.status in ("running", "done") for g in job.groups):
            job.status = "running"
        else:
            job.status = "queued"
        return job

    def close(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)
