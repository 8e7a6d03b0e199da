import json

import pytest

from labelforge.clock import ManualClock
from labelforge.config import AnnotationConfig
from labelforge.knowledge_base import ingest_catalog, load_training
from labelforge.pipeline import AnnotationEngine
from labelforge.providers import MockProvider

# Curated so that each demo utterance's expansion overlaps exactly one entry:
# "lost deb" tokens hit only faq-001 (lock/debit), "cash back" only faq-002,
# "how much money do i have" only faq-003. Keeps mock rankings unambiguous.
DEMO_ENTRIES = [
    {"id": "faq-001", "question": "Lock and unlock your credit and debit cards",
     "answer": "Use the app to lock a misplaced card instantly and unlock it later."},
    {"id": "faq-002", "question": "How to earn cash back rewards",
     "answer": "Cash back accrues automatically on eligible purchases."},
    {"id": "faq-003", "question": "Check your account balance",
     "answer": "Balances appear on the home screen after sign-in."},
    {"id": "faq-004", "question": "Set up direct deposit",
     "answer": "Share your routing and account numbers with your employer."},
    {"id": "faq-005", "question": "Dispute a transaction",
     "answer": "Start a dispute from the transaction details page."},
    {"id": "faq-006", "question": "Update your contact information",
     "answer": "Edit your profile from the settings menu."},
]

TRAINING_ROWS = [
    {"utterance": "i lost my debit card", "gold_id": "faq-001",
     "ranked_alternatives": [
         {"id": "faq-001", "score": 97, "reasoning": "Card loss maps to the lock feature."},
         {"id": "faq-005", "score": 40, "reasoning": "Could precede a dispute."}]},
    {"utterance": "someone stole my card", "gold_id": "faq-001",
     "ranked_alternatives": []},
    {"utterance": "do i get rewards for groceries", "gold_id": "faq-002",
     "ranked_alternatives": []},
    {"utterance": "what is my balance", "gold_id": "faq-003",
     "ranked_alternatives": []},
    {"utterance": "my paycheck should go to this account", "gold_id": "faq-004",
     "ranked_alternatives": []},
    {"utterance": "charge i do not recognize", "gold_id": "faq-005",
     "ranked_alternatives": []},
    {"utterance": "i moved houses", "gold_id": "faq-006",
     "ranked_alternatives": []},
    {"utterance": "freeze my card please", "gold_id": "faq-001",
     "ranked_alternatives": []},
]

EVAL_ROWS = [
    {"utterance": "lost deb", "gold_id": "faq-001"},
    {"utterance": "cash back", "gold_id": "faq-002"},
    {"utterance": "how much money do i have", "gold_id": "faq-003"},
    {"utterance": "set up my paycheck deposit", "gold_id": "faq-004"},
    {"utterance": "dispute a transaction", "gold_id": "faq-005"},
    {"utterance": "update your contact information", "gold_id": "faq-006"},
]


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(row) for row in rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def catalog_path(tmp_path_factory):
    return write_jsonl(tmp_path_factory.mktemp("data") / "catalog.jsonl", DEMO_ENTRIES)


@pytest.fixture(scope="session")
def training_path(tmp_path_factory):
    return write_jsonl(tmp_path_factory.mktemp("data") / "training.jsonl", TRAINING_ROWS)


@pytest.fixture(scope="session")
def eval_path(tmp_path_factory):
    return write_jsonl(tmp_path_factory.mktemp("data") / "eval.jsonl", EVAL_ROWS)


@pytest.fixture()
def config():
    return AnnotationConfig(
        annotation_type="FAQ", primary_column="question", secondary_column="answer"
    )


@pytest.fixture()
def catalog(config, catalog_path):
    return ingest_catalog(catalog_path, config)


@pytest.fixture()
def training(catalog, training_path):
    return load_training(training_path, catalog)


@pytest.fixture()
def make_engine(config, catalog):
    """Factory for engines over the demo catalog; closes them at teardown."""
    engines = []

    def build(seed=0, clock=None, provider=None, config_override=None, **engine_kwargs):
        clk = clock if clock is not None else ManualClock(0.0)
        prov = provider if provider is not None else MockProvider(seed=seed, clock=clk)
        engine = AnnotationEngine(
            config_override or config, catalog, prov, clock=clk, seed=seed, **engine_kwargs
        )
        engines.append(engine)
        return engine, prov, clk

    yield build
    for engine in engines:
        engine.close()
