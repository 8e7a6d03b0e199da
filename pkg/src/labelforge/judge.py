"""Consensus reranking: merge agent proposals into one final ranking.

The judge is itself a model call (low temperature, tight deadline) that
reranks the merged candidates. Because it sits on the critical path with a
small time budget, every judge failure — timeout, provider error, garbage
output, empty resolution — falls back to deterministic weighted score
aggregation, so the pipeline always produces a ranking.

Agent weights track recent human-review outcomes in a bounded window with
additive smoothing, so chronically wrong agents lose influence without any
single review swinging the weights.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AgentRun, QueryPlan
from .clock import SYSTEM_CLOCK, Clock
from .config import AnnotationConfig, interpolate
from .errors import LabelForgeError
from .knowledge_base import Catalog
from .prompting import (
    JUDGE_OUTPUT_FORMAT,
    JUDGE_SYSTEM_TEMPLATE,
    extract_json_dict,
)
from .providers import (
    ChatRequest,
    FatalProviderError,
    ModelProvider,
    ProviderError,
    Timeout,
)


class NoUsableRuns(LabelForgeError):
    pass


# Confidence bands used when the judge is unavailable: calibrated so HIGH
# means a strong score with at least two agents in agreement.
FALLBACK_HIGH = 85
FALLBACK_MEDIUM = 60


class AgentWeights:
    """Sliding-window correctness weights with additive smoothing.

    weight = (correct + alpha) / (total + 2 * alpha) over a bounded window
    of recent review outcomes. Recording an outcome does not move weights;
    `recompute` folds the windows into fresh weights (run periodically or
    on demand), so readers always see a consistent snapshot.
    """

    def __init__(self, agent_ids=(), window_size: int = 1000, alpha: float = 1.0):
        self.window_size = window_size
        self.alpha = alpha
        self._outcomes: dict[str, deque[bool]] = {
            agent_id: deque(maxlen=window_size) for agent_id in agent_ids
        }
        self._weights: dict[str, float] = {agent_id: 0.5 for agent_id in agent_ids}
        self._lock = threading.Lock()

    def record_outcome(self, agent_id: str, correct: bool) -> None:
        with self._lock:
            if agent_id not in self._outcomes:
                self._outcomes[agent_id] = deque(maxlen=self.window_size)
                self._weights[agent_id] = 0.5
            self._outcomes[agent_id].append(bool(correct))

    def recompute(self) -> dict[str, float]:
        with self._lock:
            self._weights = {
                agent_id: (sum(window) + self.alpha) / (len(window) + 2 * self.alpha)
                for agent_id, window in self._outcomes.items()
            }
            return dict(self._weights)

    def current(self) -> dict[str, float]:
        with self._lock:
            return dict(self._weights)

    def weight(self, agent_id: str) -> float:
        with self._lock:
            return self._weights.get(agent_id, 0.5)

    def counts(self) -> dict[str, tuple[int, int]]:
        with self._lock:
            return {a: (sum(w), len(w)) for a, w in self._outcomes.items()}

    def save(self, path: str | Path, now_s: float = 0.0) -> None:
        with self._lock, open(path, "w", encoding="utf-8") as fh:
            for agent_id, window in self._outcomes.items():
                fh.write(
                    json.dumps(
                        {
                            "agent_id": agent_id,
                            "outcomes": [int(v) for v in window],
                            "weight": self._weights.get(agent_id, 0.5),
                            "as_of": now_s,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path, window_size: int = 1000, alpha: float = 1.0):
        weights = cls(window_size=window_size, alpha=alpha)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            agent_id = row["agent_id"]
            weights._outcomes[agent_id] = deque(
                (bool(v) for v in row.get("outcomes", [])), maxlen=window_size
            )
            weights._weights[agent_id] = float(row.get("weight", 0.5))
        return weights


@dataclass
class CandidateAggregate:
    annotation_id: str
    per_agent_scores: dict[str, int] = field(default_factory=dict)
    reasonings: list[tuple[str, str]] = field(default_factory=list)

    @property
    def support(self) -> int:
        return len(self.per_agent_scores)


def aggregate(runs: list[AgentRun]) -> list[CandidateAggregate]:
    """Merge usable runs into per-candidate aggregates, ordered by id.

    An agent proposing the same candidate twice counts once at its best
    score; support is the number of distinct agents backing the candidate.
    """
    usable = [run for run in runs if run.status == "ok"]
    if not usable:
        raise NoUsableRuns(
            "no agent produced a usable verdict: "
            + ", ".join(f"{r.agent_id}={r.status}" for r in runs)
        )
    merged: dict[str, CandidateAggregate] = {}
    for run in usable:
        for candidate in run.resolved:
            agg = merged.setdefault(
                candidate.annotation_id, CandidateAggregate(candidate.annotation_id)
            )
            prev = agg.per_agent_scores.get(run.agent_id)
            if prev is None or candidate.score > prev:
                agg.per_agent_scores[run.agent_id] = candidate.score
            if candidate.reasoning:
                agg.reasonings.append((run.agent_id, candidate.reasoning))
    return [merged[key] for key in sorted(merged)]


@dataclass(frozen=True)
class RankedCandidate:
    annotation_id: str
    final_score: int
    reasoning: str
    support: int


@dataclass(frozen=True)
class JudgeResult:
    ranked: tuple[RankedCandidate, ...]
    consensus_strength: str  # STRONG | MODERATE | WEAK
    confidence: str  # HIGH | MEDIUM | LOW
    source: str  # judge | fallback_aggregation


def consensus_label(max_support: int) -> str:
    if max_support >= 3:
        return "STRONG"
    if max_support == 2:
        return "MODERATE"
    return "WEAK"


def fallback_rank(
    aggs: list[CandidateAggregate],
    weights: AgentWeights,
    top_n: int,
    rules=(),
) -> JudgeResult:
    """Deterministic weighted aggregation used when the judge cannot run.

    Weights are normalized to mean 1 over the agents present in this
    request, so uniformly scaling all weights changes nothing. Final scores
    are scaled to 100 for the best candidate; ordering is by raw weighted
    score with ascending-id tie breaks.
    """
    if not aggs:
        raise NoUsableRuns("nothing to rank")
    present = sorted({agent for agg in aggs for agent in agg.per_agent_scores})
    snapshot = weights.current()
    raw_weights = {agent: snapshot.get(agent, 0.5) for agent in present}
    mean_weight = sum(raw_weights.values()) / len(raw_weights)
    normalized = {
        agent: (weight / mean_weight if mean_weight > 0 else 1.0)
        for agent, weight in raw_weights.items()
    }
    raws = {
        agg.annotation_id: sum(
            normalized[agent] * score for agent, score in agg.per_agent_scores.items()
        )
        for agg in aggs
    }
    max_raw = max(raws.values())
    by_id = {agg.annotation_id: agg for agg in aggs}
    order = sorted(raws, key=lambda annotation_id: (-raws[annotation_id], annotation_id))
    ranked = []
    for annotation_id in order[:top_n]:
        agg = by_id[annotation_id]
        final = int(round(100.0 * raws[annotation_id] / max_raw)) if max_raw > 0 else 0
        supporters = ", ".join(sorted(agg.per_agent_scores))
        ranked.append(
            RankedCandidate(
                annotation_id=annotation_id,
                final_score=final,
                reasoning=f"weighted agreement of {agg.support} agent(s): {supporters}",
                support=agg.support,
            )
        )
    max_support = max(agg.support for agg in aggs)
    top = ranked[0]
    if top.final_score >= FALLBACK_HIGH and top.support >= 2:
        confidence = "HIGH"
    elif top.final_score >= FALLBACK_MEDIUM:
        confidence = "MEDIUM"
    else:
        confidence = "LOW"
    result = JudgeResult(
        ranked=tuple(ranked),
        consensus_strength=consensus_label(max_support),
        confidence=confidence,
        source="fallback_aggregation",
    )
    return apply_rules(result, rules)


def apply_rules(result: JudgeResult, rules) -> JudgeResult:
    """Run post-ranking business-rule hooks (ships empty by default)."""
    ranked = result.ranked
    for rule in rules:
        ranked = tuple(rule(ranked))
    if ranked is result.ranked:
        return result
    return JudgeResult(
        ranked=ranked,
        consensus_strength=result.consensus_strength,
        confidence=result.confidence,
        source=result.source,
    )


def build_judge_prompt(
    plan: QueryPlan,
    aggs: list[CandidateAggregate],
    catalog: Catalog,
    config: AnnotationConfig,
) -> tuple[str, str]:
    system_prompt = interpolate(JUDGE_SYSTEM_TEMPLATE, config)
    lines = [f'Original query: "{plan.original_query}"']
    if plan.needs_expansion:
        lines.append(f'Expanded query: "{plan.expanded_query}"')
    lines.append("")
    lines.append(f"Candidate {config.annotation_type_plural}:")
    for agg in aggs:
        entry = catalog.by_id.get(agg.annotation_id)
        title = entry.primary_text if entry else agg.annotation_id
        scores = ", ".join(
            f"{agent}={score}" for agent, score in sorted(agg.per_agent_scores.items())
        )
        lines.append(f"[{agg.annotation_id}] {title} (support={agg.support}; scores: {scores})")
        if entry and entry.secondary_text:
            lines.append(f"    Content: {entry.secondary_text}")
        for agent, reasoning in agg.reasonings[:4]:
            lines.append(f"    {agent}: {reasoning}")
    lines.append("")
    lines.append(f'User {config.user_input_label}: "{plan.original_query}"')
    lines.append("")
    lines.append(JUDGE_OUTPUT_FORMAT)
    return system_prompt, "\n".join(lines)


def judge_rerank(
    plan: QueryPlan,
    aggs: list[CandidateAggregate],
    runs: list[AgentRun],
    config: AnnotationConfig,
    provider: ModelProvider,
    weights: AgentWeights,
    catalog: Catalog,
    clock: Clock = SYSTEM_CLOCK,
    rules=(),
) -> JudgeResult:
    """Rerank aggregates with the judge model, falling back on any failure.

    Judge output may only reference candidates that exist in the
    aggregates; hallucinated entries are dropped, and if nothing survives
    the fallback ranking is used instead.
    """
    if not aggs:
        raise NoUsableRuns("nothing to rerank")
    system_prompt, user_prompt = build_judge_prompt(plan, aggs, catalog, config)
    request = ChatRequest(
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        temperature=0.3,
        deadline_ms=config.judge_timeout_ms,
    )
    try:
        response = provider.complete(request)
        data, _stage = extract_json_dict(response.text)
        ranked = _resolve_judge_output(data, aggs, catalog, config.top_n_results)
        if ranked is None or not ranked:
            return fallback_rank(aggs, weights, config.top_n_results, rules=rules)
        consensus = data.get("consensus_strength")
        confidence = data.get("confidence")
        if consensus not in ("STRONG", "MODERATE", "WEAK"):
            consensus = consensus_label(max(agg.support for agg in aggs))
        if confidence not in ("HIGH", "MEDIUM", "LOW"):
            confidence = "LOW"
        result = JudgeResult(
            ranked=tuple(ranked),
            consensus_strength=consensus,
            confidence=confidence,
            source="judge",
        )
        return apply_rules(result, rules)
    except (Timeout, ProviderError, FatalProviderError, LabelForgeError):
        return fallback_rank(aggs, weights, config.top_n_results, rules=rules)


def _resolve_judge_output(
    data: dict,
    aggs: list[CandidateAggregate],
    catalog: Catalog,
    top_n: int,
) -> list[RankedCandidate] | None:
    items = data.get("reranked_annotations")
    if not isinstance(items, list):
        return None
    by_id = {agg.annotation_id: agg for agg in aggs}
    by_title: dict[str, str] = {}
    for agg in aggs:
        entry = catalog.by_id.get(agg.annotation_id)
        if entry is not None:
            by_title.setdefault(" ".join(entry.primary_text.lower().split()), agg.annotation_id)
    ranked: list[RankedCandidate] = []
    seen: set[str] = set()
    for item in items:
        if not isinstance(item, dict):
            return None
        name = item.get("annotation")
        score = item.get("final_score")
        if not isinstance(name, str):
            return None
        if isinstance(score, float) and score.is_integer():
            score = int(score)
        if not isinstance(score, int) or isinstance(score, bool) or not (0 <= score <= 100):
            return None
        annotation_id = by_title.get(" ".join(name.lower().split()))
        if annotation_id is None and name in by_id:
            annotation_id = name
        if annotation_id is None or annotation_id in seen:
            continue  # hallucinated or duplicate candidates are dropped
        seen.add(annotation_id)
        reasoning = item.get("reasoning", "")
        ranked.append(
            RankedCandidate(
                annotation_id=annotation_id,
                final_score=score,
                reasoning=reasoning if isinstance(reasoning, str) else "",
                support=by_id[annotation_id].support,
            )
        )
    ranked.sort(key=lambda c: (-c.final_score, c.annotation_id))
    return ranked[:top_n]
