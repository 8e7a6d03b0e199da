"""HTTP service: annotate, review loop, metrics, catalog search, batch, auth."""

import time

import pytest
from fastapi.testclient import TestClient

from labelforge.audit import AuditLog
from labelforge.clock import ManualClock
from labelforge.providers import FaultRule, MockProvider
from labelforge.service import AlreadyDecided, ReviewItem, ReviewStore, create_app

from helpers import LowScoreJudgeMock

ALL_AGENT_TIMEOUTS = [
    FaultRule(match="prioritize exact and near-exact wording", fail="timeout"),
    FaultRule(match="prioritize semantic similarity", fail="timeout"),
    FaultRule(match="use the full", fail="timeout"),
    FaultRule(match="combine exact matching", fail="timeout"),
]


@pytest.fixture()
def app_client(make_engine, tmp_path):
    """TestClient over a default engine plus its audit log and review store."""
    engine, provider, clock = make_engine()
    audit = AuditLog(tmp_path / "audit.jsonl", clock=clock)
    store = ReviewStore(clock=clock)
    app = create_app(engine, audit_log=audit, review_store=store,
                     batch_dir=tmp_path / "batches")
    return TestClient(app), engine, audit, store


@pytest.fixture()
def review_client(make_engine, tmp_path):
    """Client whose judge scores low, so every request lands in review."""
    clock = ManualClock(0.0)
    provider = LowScoreJudgeMock(seed=0, clock=clock)
    engine, _, _ = make_engine(provider=provider, clock=clock)
    store = ReviewStore(clock=clock)
    app = create_app(engine, review_store=store, batch_dir=tmp_path / "batches")
    return TestClient(app), engine, store


def test_health(app_client):
    client, _, _, _ = app_client
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["provider_kind"] == "mock"
    assert body["uptime_s"] >= 0.0


def test_annotate_happy_path(app_client):
    client, _, _, _ = app_client
    response = client.post("/v1/annotate", json={"utterance": "lock my debit cards"})
    assert response.status_code == 200
    body = response.json()
    assert body["band"] == "HIGH"
    assert body["action"] == "auto_accept"
    assert body["top"][0]["annotation_id"] == "faq-001"
    assert body["top"][0]["title"] == "Lock and unlock your credit and debit cards"
    assert body["top"][0]["final_score"] == 100
    assert body["source"] == "judge"
    assert body["review_item_id"] is None
    assert not body["degraded"]
    assert body["utterance_id"].startswith("utt-")


def test_annotate_rejects_empty_utterance(app_client):
    client, _, _, _ = app_client
    response = client.post("/v1/annotate", json={"utterance": "   "})
    assert response.status_code == 400
    assert response.json() == {
        "error": "invalid_request",
        "detail": "utterance must be non-empty",
    }


def test_annotate_writes_masked_audit_record(app_client):
    client, _, audit, _ = app_client
    client.post("/v1/annotate", json={"utterance": "lock my debit cards 123-45-6789"})
    records = audit.read_all()
    assert len(records) == 1
    assert "⟨SSN⟩" in records[0].masked_utterance
    assert "123-45-6789" not in records[0].masked_utterance
    assert records[0].result_summary["band"] == "HIGH"
    assert records[0].result_summary["top"][0]["annotation_id"] == "faq-001"
    assert set(records[0].agent_statuses.values()) == {"ok"}


def test_annotate_all_agents_failed_returns_503(make_engine, tmp_path):
    clock = ManualClock(0.0)
    provider = MockProvider(seed=0, clock=clock, fault_rules=ALL_AGENT_TIMEOUTS)
    engine, _, _ = make_engine(provider=provider, clock=clock)
    audit = AuditLog(tmp_path / "audit.jsonl", clock=clock)
    client = TestClient(create_app(engine, audit_log=audit))
    response = client.post("/v1/annotate", json={"utterance": "lock my debit cards"})
    assert response.status_code == 503
    body = response.json()
    assert body["error"] == "all_agents_failed"
    assert set(body["detail"].values()) == {"timeout"}
    assert audit.read_all()[0].result_summary == {"error": "all_agents_failed"}


# ---- review loop -----------------------------------------------------------


def submit_low(client, utterance="lock my debit cards"):
    body = client.post("/v1/annotate", json={"utterance": utterance}).json()
    assert body["band"] == "LOW"
    assert body["review_item_id"] is not None
    return body


def test_low_band_lands_in_review_queue(review_client):
    client, _, _ = review_client
    body = submit_low(client)
    queue = client.get("/v1/review/queue").json()["items"]
    assert len(queue) == 1
    item = queue[0]
    assert item["item_id"] == body["review_item_id"]
    assert item["status"] == "pending"
    assert item["utterance_masked"] == "lock my debit cards"
    assert item["candidates"][0]["annotation_id"] == "faq-001"
    assert set(item["agent_statuses"].values()) == {"ok"}
    assert len(item["per_agent_top"]) == 4

    fetched = client.get(f"/v1/review/{body['review_item_id']}").json()
    assert fetched == item


def test_review_item_not_found(app_client):
    client, _, _, _ = app_client
    response = client.get("/v1/review/rev-nope")
    assert response.status_code == 404
    assert response.json()["error"] == "not_found"


def test_decision_removes_item_and_updates_metrics(review_client):
    client, engine, store = review_client
    body = submit_low(client)
    item_id = body["review_item_id"]
    top_id = body["top"][0]["annotation_id"]

    response = client.post(
        f"/v1/review/{item_id}/decision",
        json={"reviewer": "sam", "chosen_id": top_id},
    )
    assert response.status_code == 200
    payload = response.json()
    assert payload["agreement"] is True
    assert payload["item"]["status"] == "decided"
    assert payload["item"]["decision"]["reviewer"] == "sam"

    assert client.get("/v1/review/queue").json()["items"] == []
    metrics = client.get("/v1/metrics").json()
    assert metrics["review"] == {
        "pending": 0, "decisions": 1, "agreements": 1, "agreement_rate": 1.0,
    }
    # every ok agent had the chosen candidate on top, so all outcomes are correct
    counts = engine.weights.counts()
    assert all(count == (1, 1) for count in counts.values())


def test_double_decision_conflicts(review_client):
    client, _, _ = review_client
    item_id = submit_low(client)["review_item_id"]
    first = client.post(f"/v1/review/{item_id}/decision",
                        json={"reviewer": "sam", "reject_all": True})
    assert first.status_code == 200
    second = client.post(f"/v1/review/{item_id}/decision",
                         json={"reviewer": "sam", "reject_all": True})
    assert second.status_code == 409
    assert second.json()["error"] == "already_decided"


def test_disagreeing_choice_lowers_agreement_rate(review_client):
    client, engine, _ = review_client
    body = submit_low(client)
    second_choice = body["top"][1]["annotation_id"]
    response = client.post(
        f"/v1/review/{body['review_item_id']}/decision",
        json={"reviewer": "sam", "chosen_id": second_choice},
    )
    assert response.json()["agreement"] is False
    metrics = client.get("/v1/metrics").json()
    assert metrics["review"]["agreement_rate"] == 0.0
    # agents whose top pick was not the chosen one get a negative outcome
    assert all(count == (0, 1) for count in engine.weights.counts().values())


def test_override_outside_candidates(review_client):
    client, _, _ = review_client
    item_id = submit_low(client)["review_item_id"]
    response = client.post(
        f"/v1/review/{item_id}/decision",
        json={"reviewer": "sam", "override_id": "faq-006"},
    )
    assert response.status_code == 200
    payload = response.json()
    assert payload["item"]["decision"]["override_id"] == "faq-006"


def test_reject_all_records_negative_outcomes(review_client):
    client, engine, _ = review_client
    item_id = submit_low(client)["review_item_id"]
    response = client.post(f"/v1/review/{item_id}/decision",
                           json={"reviewer": "sam", "reject_all": True})
    assert response.status_code == 200
    assert response.json()["agreement"] is False
    assert all(count == (0, 1) for count in engine.weights.counts().values())


@pytest.mark.parametrize(
    "body,detail_part",
    [
        ({"reviewer": "sam"}, "exactly one"),
        ({"reviewer": "sam", "chosen_id": "faq-001", "reject_all": True}, "exactly one"),
        ({"reviewer": "  ", "reject_all": True}, "reviewer"),
        ({"reviewer": "sam", "chosen_id": "faq-999"}, "not a candidate"),
        ({"reviewer": "sam", "override_id": "ghost-1"}, "not in the catalog"),
    ],
    ids=["no-choice", "two-choices", "blank-reviewer", "bad-chosen", "bad-override"],
)
def test_decision_validation(review_client, body, detail_part):
    client, _, _ = review_client
    item_id = submit_low(client)["review_item_id"]
    response = client.post(f"/v1/review/{item_id}/decision", json=body)
    assert response.status_code == 400
    assert detail_part in response.json()["detail"]


def test_decision_on_unknown_item(app_client):
    client, _, _, _ = app_client
    response = client.post("/v1/review/rev-missing/decision",
                           json={"reviewer": "sam", "reject_all": True})
    assert response.status_code == 404


# ---- metrics and catalog ------------------------------------------------------


def test_metrics_shape(app_client):
    client, _, _, _ = app_client
    client.post("/v1/annotate", json={"utterance": "check my balance"})
    metrics = client.get("/v1/metrics").json()
    assert metrics["requests"] == 1
    assert set(metrics["latency_ms"]) == {"p50", "p95", "p99"}
    assert metrics["band_fractions"]["HIGH"] == 1.0
    assert set(metrics["weights"]) == {
        "primary_no_emb", "primary_emb", "full_no_emb", "full_emb",
    }
    assert metrics["review"]["pending"] == 0


def test_catalog_search(app_client):
    client, _, _, _ = app_client
    hits = client.get("/v1/catalog", params={"query": "cash back rewards"}).json()
    assert hits["entries"][0]["id"] == "faq-002"
    assert "cash back" in hits["entries"][0]["primary_text"].lower()

    unfiltered = client.get("/v1/catalog", params={"limit": 3}).json()
    assert [e["id"] for e in unfiltered["entries"]] == ["faq-001", "faq-002", "faq-003"]
    assert set(unfiltered["entries"][0]) == {"id", "primary_text", "secondary_text"}


# ---- batch over HTTP -----------------------------------------------------------


def test_batch_submit_and_poll(app_client):
    client, _, _, _ = app_client
    items = [
        {"id": "b-1", "utterance": "lock my debit cards"},
        {"id": "b-2", "utterance": "check my balance"},
    ]
    submitted = client.post("/v1/batch", json={"items": items}).json()
    assert submitted["total_items"] == 2
    job_id = submitted["job_id"]

    deadline = time.monotonic() + 10.0
    status = None
    while time.monotonic() < deadline:
        status = client.get(f"/v1/batch/{job_id}").json()
        if status["status"] == "complete":
            break
        time.sleep(0.01)
    assert status["status"] == "complete"
    assert status["completed_items"] == 2
    assert status["pending_ids"] == []


def test_batch_rejects_empty_and_bad_items(app_client):
    client, _, _, _ = app_client
    assert client.post("/v1/batch", json={"items": []}).status_code == 400
    bad = client.post("/v1/batch", json={"items": [{"id": "x"}]})
    assert bad.status_code == 400
    assert bad.json()["error"] == "invalid_request"


def test_batch_poll_unknown_job(app_client):
    client, _, _, _ = app_client
    response = client.get("/v1/batch/bogus")
    assert response.status_code == 404
    assert response.json()["error"] == "not_found"


# ---- auth -----------------------------------------------------------------------


def test_bearer_token_gates_v1(make_engine, tmp_path):
    engine, _, _ = make_engine()
    client = TestClient(create_app(engine, token="sekrit",
                                   batch_dir=tmp_path / "batches"))
    assert client.get("/health").status_code == 200  # health stays open

    denied = client.get("/v1/metrics")
    assert denied.status_code == 401
    assert denied.json() == {
        "error": "unauthorized",
        "detail": "missing or invalid bearer token",
    }
    assert client.get(
        "/v1/metrics", headers={"Authorization": "Bearer wrong"}
    ).status_code == 401
    assert client.get(
        "/v1/metrics", headers={"Authorization": "Bearer sekrit"}
    ).status_code == 200


# ---- review store ----------------------------------------------------------------


def make_item(i: int) -> ReviewItem:
    return ReviewItem(
        item_id=f"rev-{i}",
        utterance_masked=f"utterance {i}",
        expanded_query="",
        candidates=[{"annotation_id": "faq-001", "title": "t", "final_score": 40,
                     "support": 2, "reasoning": ""}],
        per_agent_top={"primary_no_emb": "faq-001"},
        agent_statuses={"primary_no_emb": "ok"},
        created_s=float(i),
    )


def test_review_store_fifo_and_limit():
    store = ReviewStore()
    for i in range(5):
        store.enqueue(make_item(i))
    assert [i.item_id for i in store.pending(limit=2)] == ["rev-0", "rev-1"]
    store.decide("rev-0", {"reviewer": "sam"}, agreement=True)
    assert [i.item_id for i in store.pending(limit=2)] == ["rev-1", "rev-2"]
    assert store.pending_count() == 4


def test_review_store_decide_once():
    store = ReviewStore()
    store.enqueue(make_item(1))
    store.decide("rev-1", {"reviewer": "sam"}, agreement=False)
    with pytest.raises(AlreadyDecided):
        store.decide("rev-1", {"reviewer": "sam"}, agreement=False)
    with pytest.raises(KeyError):
        store.decide("rev-9", {"reviewer": "sam"}, agreement=False)


def test_review_store_agreement_rate():
    store = ReviewStore()
    assert store.agreement_rate == 0.0
    for i in range(4):
        store.enqueue(make_item(i))
    store.decide("rev-0", {}, agreement=True)
    store.decide("rev-1", {}, agreement=True)
    store.decide("rev-2", {}, agreement=False)
    assert store.agreement_rate == pytest.approx(2.0 / 3.0)


def test_review_store_persistence_replay(tmp_path):
    path = tmp_path / "review.jsonl"
    store = ReviewStore(path=path)
    for i in range(3):
        store.enqueue(make_item(i))
    store.decide("rev-1", {"reviewer": "sam"}, agreement=True)

    reopened = ReviewStore(path=path)
    assert reopened.pending_count() == 2
    assert [i.item_id for i in reopened.pending()] == ["rev-0", "rev-2"]
    assert reopened.decisions == 1
    assert reopened.agreements == 1
    decided = reopened.get("rev-1")
    assert decided.status == "decided"
    assert decided.decision == {"reviewer": "sam"}
