"""HTTP service: annotation endpoint, review queue, metrics, batch.

The service is a thin shell over the engine. Low-confidence results are
queued for human review; reviewer decisions flow back into the judge's
agent weights, closing the accuracy feedback loop. Review state lives in
an in-memory index with optional JSONL persistence, which is plenty at
human-review scale.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .audit import AuditLog
from .clock import SYSTEM_CLOCK, Clock
from .errors import LabelForgeError
from .pipeline import AllAgentsFailed, AnnotationEngine, AnnotationResult
from .retrieval import bm25_topk


class AlreadyDecided(LabelForgeError):
    pass


@dataclass
class ReviewItem:
    item_id: str
    utterance_masked: str
    expanded_query: str
    candidates: list[dict]  # annotation_id, title, final_score, reasoning, support
    per_agent_top: dict[str, str | None]
    agent_statuses: dict[str, str]
    created_s: float
    status: str = "pending"  # pending | decided
    decision: dict | None = None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "utterance_masked": self.utterance_masked,
            "expanded_query": self.expanded_query,
            "candidates": self.candidates,
            "per_agent_top": self.per_agent_top,
            "agent_statuses": self.agent_statuses,
            "created_s": self.created_s,
            "status": self.status,
            "decision": self.decision,
        }


class ReviewStore:
    """FIFO review queue with decide-once semantics and optional persistence."""

    def __init__(self, path: str | Path | None = None, clock: Clock = SYSTEM_CLOCK):
        self._clock = clock
        self._path = Path(path) if path else None
        self._items: dict[str, ReviewItem] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self.decisions = 0
        self.agreements = 0
        if self._path and self._path.exists():
            self._replay()

    def _replay(self) -> None:
        for line in self._path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            if event["type"] == "item":
                item = ReviewItem(**event["item"])
                self._items[item.item_id] = item
                self._order.append(item.item_id)
            elif event["type"] == "decision":
                item = self._items.get(event["item_id"])
                if item is not None and item.status == "pending":
                    item.status = "decided"
                    item.decision = event["decision"]
                    self.decisions += 1
                    self.agreements += 1 if event.get("agreement") else 0

    def _persist(self, event: dict) -> None:
        if self._path is None:
            return
        with open(self._path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def enqueue(self, item: ReviewItem) -> None:
        with self._lock:
            self._items[item.item_id] = item
            self._order.append(item.item_id)
            self._persist({"type": "item", "item": item.to_dict()})

    def pending(self, limit: int = 50) -> list[ReviewItem]:
        with self._lock:
            out = []
            for item_id in self._order:
                item = self._items[item_id]
                if item.status == "pending":
                    out.append(item)
                    if len(out) >= limit:
                        break
            return out

    def pending_count(self) -> int:
        with self._lock:
            return sum(1 for i in self._items.values() if i.status == "pending")

    def get(self, item_id: str) -> ReviewItem | None:
        with self._lock:
            return self._items.get(item_id)

    def decide(self, item_id: str, decision: dict, agreement: bool) -> ReviewItem:
        with self._lock:
            item = self._items.get(item_id)
            if item is None:
                raise KeyError(item_id)
            if item.status == "decided":
                raise AlreadyDecided(item_id)
            item.status = "decided"
            item.decision = decision
            self.decisions += 1
            if agreement:
                self.agreements += 1
            self._persist(
                {"type": "decision", "item_id": item_id, "decision": decision,
                 "agreement": agreement}
            )
            return item

    @property
    def agreement_rate(self) -> float:
        return self.agreements / self.decisions if self.decisions else 0.0


class AnnotateBody(BaseModel):
    utterance: str
    context: str = ""


class DecisionBody(BaseModel):
    reviewer: str
    chosen_id: str | None = None
    override_id: str | None = None
    reject_all: bool = False


class BatchBody(BaseModel):
    items: list[dict]


def _error(status: int, error: str, detail) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": error, "detail": detail})


def create_app(
    engine: AnnotationEngine,
    audit_log: AuditLog | None = None,
    review_store: ReviewStore | None = None,
    token: str | None = None,
    batch_dir: str | Path | None = None,
    cors_origins: tuple[str, ...] = ("*",),
) -> FastAPI:
    """Build the FastAPI app around an engine.

    `token`, when set, gates every /v1 endpoint behind a static bearer
    token — enough for an internal review tool, swap for real auth at the
    gateway when exposed wider.
    """
    app = FastAPI(title="labelforge", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = review_store if review_store is not None else ReviewStore(clock=engine.clock)
    start_s = engine.clock.now_s()
    batches = Path(batch_dir) if batch_dir else Path(".") / "batches"

    @app.middleware("http")
    async def _auth(request: Request, call_next):
        if token and request.url.path.startswith("/v1"):
            header = request.headers.get("authorization", "")
            if header != f"Bearer {token}":
                return _error(401, "unauthorized", "missing or invalid bearer token")
        return await call_next(request)

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "uptime_s": engine.clock.now_s() - start_s,
            "provider_kind": engine.provider.provider_kind,
        }

    @app.post("/v1/annotate")
    def annotate(body: AnnotateBody):
        if not body.utterance.strip():
            return _error(400, "invalid_request", "utterance must be non-empty")
        try:
            result = engine.annotate(body.utterance, context=body.context)
        except AllAgentsFailed as exc:
            if audit_log is not None:
                audit_log.append(body.utterance, {"error": "all_agents_failed"}, exc.statuses)
            return _error(503, "all_agents_failed", exc.statuses)
        review_item_id = None
        if result.routing.band == "LOW":
            review_item_id = _enqueue_review(store, engine, result)
        if audit_log is not None:
            audit_log.append(
                body.utterance,
                {
                    "band": result.routing.band,
                    "action": result.routing.action,
                    "top": result.top()[:1],
                    "degraded": result.degraded,
                },
                {run.agent_id: run.status for run in result.runs},
            )
        return {
            "utterance_id": result.utterance_id,
            "top": _candidate_payload(engine, result),
            "band": result.routing.band,
            "action": result.routing.action,
            "degraded": result.degraded,
            "source": result.judge.source,
            "consensus_strength": result.judge.consensus_strength,
            "expanded_query": result.plan.expanded_query,
            "latency_ms": result.total_latency_ms,
            "review_item_id": review_item_id,
        }

    @app.get("/v1/review/queue")
    def review_queue(limit: int = 50):
        return {"items": [item.to_dict() for item in store.pending(limit=limit)]}

    @app.get("/v1/review/{item_id}")
    def review_item(item_id: str):
        item = store.get(item_id)
        if item is None:
            return _error(404, "not_found", f"no review item {item_id!r}")
        return item.to_dict()

    @app.post("/v1/review/{item_id}/decision")
    def review_decision(item_id: str, body: DecisionBody):
        item = store.get(item_id)
        if item is None:
            return _error(404, "not_found", f"no review item {item_id!r}")
        choices = [body.chosen_id is not None, body.override_id is not None, body.reject_all]
        if sum(1 for c in choices if c) != 1:
            return _error(400, "invalid_request",
                          "exactly one of chosen_id, override_id, reject_all required")
        if not body.reviewer.strip():
            return _error(400, "invalid_request", "reviewer must be non-empty")
        candidate_ids = [c["annotation_id"] for c in item.candidates]
        if body.chosen_id is not None and body.chosen_id not in candidate_ids:
            return _error(400, "invalid_request",
                          f"chosen_id {body.chosen_id!r} is not a candidate")
        if body.override_id is not None and body.override_id not in engine.catalog.by_id:
            return _error(400, "invalid_request",
                          f"override_id {body.override_id!r} is not in the catalog")
        chosen = body.chosen_id or body.override_id
        agreement = bool(chosen and candidate_ids and chosen == candidate_ids[0])
        decision = {
            "reviewer": body.reviewer,
            "chosen_id": body.chosen_id,
            "override_id": body.override_id,
            "reject_all": body.reject_all,
            "decided_s": engine.clock.now_s(),
        }
        try:
            item = store.decide(item_id, decision, agreement)
        except KeyError:
            return _error(404, "not_found", f"no review item {item_id!r}")
        except AlreadyDecided:
            return _error(409, "already_decided", f"review item {item_id!r} is immutable")
        for agent_id, top_id in item.per_agent_top.items():
            engine.weights.record_outcome(agent_id, bool(chosen) and top_id == chosen)
        return {"item": item.to_dict(), "agreement": agreement}

    @app.get("/v1/metrics")
    def metrics():
        snapshot = engine.stats().to_dict()
        snapshot["review"] = {
            "pending": store.pending_count(),
            "decisions": store.decisions,
            "agreements": store.agreements,
            "agreement_rate": store.agreement_rate,
        }
        snapshot["weights"] = engine.weights.current()
        return snapshot

    @app.get("/v1/catalog")
    def catalog_search(query: str = "", limit: int = 10):
        mode = next(iter(engine.retrieval.bm25))
        index = engine.retrieval.bm25.get("primary_only", engine.retrieval.bm25[mode])
        if query.strip():
            ranked = bm25_topk(index, query, min(limit, len(engine.catalog)))
            ids = [annotation_id for annotation_id, _score in ranked]
        else:
            ids = [entry.id for entry in engine.catalog.entries[:limit]]
        return {
            "entries": [
                {
                    "id": entry.id,
                    "primary_text": entry.primary_text,
                    "secondary_text": entry.secondary_text,
                }
                for entry in (engine.catalog.by_id[i] for i in ids)
            ]
        }

    @app.post("/v1/batch")
    def submit_batch(body: BatchBody):
        if not body.items:
            return _error(400, "invalid_request", "items must be non-empty")
        batches.mkdir(parents=True, exist_ok=True)
        input_path = batches / f"input-{uuid.uuid4().hex[:8]}.jsonl"
        with open(input_path, "w", encoding="utf-8") as fh:
            for item in body.items:
                fh.write(json.dumps(item) + "\n")
        try:
            job = engine.submit_batch(input_path, batches)
        except LabelForgeError as exc:
            return _error(400, "invalid_request", str(exc))
        return job.to_dict()

    @app.get("/v1/batch/{job_id}")
    def poll_batch(job_id: str):
        try:
            return engine.poll_batch(job_id).to_dict()
        except LabelForgeError:
            return _error(404, "not_found", f"no batch job {job_id!r}")

    return app


def _enqueue_review(store: ReviewStore, engine: AnnotationEngine,
                    result: AnnotationResult) -> str:
    from .audit import mask

    masked, _count = mask(result.utterance)
    item = ReviewItem(
        item_id=f"rev-{uuid.uuid4().hex[:10]}",
        utterance_masked=masked,
        expanded_query=result.plan.expanded_query,
        candidates=_candidate_payload(engine, result),
        per_agent_top={
            run.agent_id: (run.resolved[0].annotation_id if run.resolved else None)
            for run in result.runs
            if run.status == "ok"
        },
        agent_statuses={run.agent_id: run.status for run in result.runs},
        created_s=engine.clock.now_s(),
    )
    store.enqueue(item)
    return item.item_id


def _candidate_payload(engine: AnnotationEngine, result: AnnotationResult) -> list[dict]:
    out = []
    for candidate in result.judge.ranked:
        entry = engine.catalog.by_id.get(candidate.annotation_id)
        out.append(
            {
                "annotation_id": candidate.annotation_id,
                "title": entry.primary_text if entry else candidate.annotation_id,
                "final_score": candidate.final_score,
                "support": candidate.support,
                "reasoning": candidate.reasoning,
            }
        )
    return out
