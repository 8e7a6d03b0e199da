"""Candidate retrieval: lexical BM25 and embedding-based nearest neighbors.

The nearest-neighbor search is an exact cosine scan kept behind a small
interface; at annotation-catalog scale (hundreds to low thousands of
entries) exactness is cheap and deterministic, and an approximate backend
can replace the scan later without touching callers. Embedding vectors are
unit-normalized and truncatable to a prefix (matryoshka-style), so one
native-dimension index serves smaller configured dimensions.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AnnotationConfig
from .errors import LabelForgeError, ValidationError
from .knowledge_base import Catalog, embedding_text
from .providers import EmbeddingRequest, ModelProvider


class DimensionMismatch(LabelForgeError):
    pass


class DegenerateVector(LabelForgeError):
    pass


_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; no stemming, no stopwords."""
    return [tok for tok in _TOKEN_RE.split(text.lower()) if tok]


def mrl_truncate(vector, dims: int) -> np.ndarray:
    """Truncate a vector to its first `dims` components and renormalize."""
    vec = np.asarray(vector, dtype=np.float64)
    if dims < 1 or dims > vec.shape[0]:
        raise ValidationError("dims", f"need 1 <= dims <= {vec.shape[0]}, got {dims}")
    prefix = vec[:dims]
    norm = float(np.linalg.norm(prefix))
    if norm < 1e-12:
        raise DegenerateVector(f"prefix norm {norm} below 1e-12")
    return prefix / norm


@dataclass
class EmbeddingIndex:
    mode: str  # primary_only | full_context
    dims: int
    keys: list[str]
    matrix: np.ndarray  # shape (n, dims), rows unit-normalized
    source_digest: str = ""

    def __len__(self) -> int:
        return len(self.keys)


def build_embedding_index(
    catalog: Catalog,
    mode: str,
    dims: int,
    provider: ModelProvider,
    config: AnnotationConfig,
) -> EmbeddingIndex:
    texts = tuple(embedding_text(entry, mode, config).text for entry in catalog.entries)
    vectors = provider.embed(EmbeddingRequest(texts=texts, target_dims=dims))
    matrix = np.vstack(vectors) if vectors else np.zeros((0, dims))
    return EmbeddingIndex(
        mode=mode,
        dims=dims,
        keys=[entry.id for entry in catalog.entries],
        matrix=matrix,
        source_digest=catalog.source_digest,
    )


def knn(index: EmbeddingIndex, query_vec, k: int) -> list[tuple[str, float]]:
    """Exact top-k by cosine similarity; ties broken by ascending id."""
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (index.dims,):
        raise DimensionMismatch(f"query has shape {q.shape}, index dims {index.dims}")
    if k < 1:
        raise ValidationError("k", "must be >= 1")
    if len(index) == 0:
        return []
    scores = np.clip(index.matrix @ q, -1.0, 1.0)
    order = sorted(zip(index.keys, scores.tolist()), key=lambda kv: (-kv[1], kv[0]))
    return order[: min(k, len(order))]


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    meta = json.dumps(
        {
            "version": 1,
            "mode": index.mode,
            "dims": index.dims,
            "source_digest": index.source_digest,
        }
    )
    np.savez(
        Path(path),
        matrix=index.matrix,
        keys=np.asarray(index.keys, dtype="U"),
        meta=np.asarray(meta, dtype="U"),
    )


def load_index(path: str | Path) -> EmbeddingIndex:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != 1:
            raise ValidationError("version", f"unsupported index version {meta.get('version')}")
        return EmbeddingIndex(
            mode=meta["mode"],
            dims=int(meta["dims"]),
            keys=[str(k) for k in data["keys"].tolist()],
            matrix=np.asarray(data["matrix"], dtype=np.float64),
            source_digest=meta["source_digest"],
        )


def build_or_load_index(
    catalog: Catalog,
    mode: str,
    dims: int,
    provider: ModelProvider,
    config: AnnotationConfig,
    path: str | Path,
) -> tuple[EmbeddingIndex, bool]:
    """Load a persisted index when it matches the catalog digest, else rebuild.

    Returns (index, rebuilt).
    """
    p = Path(path)
    if p.exists():
        try:
            cached = load_index(p)
        except (OSError, ValueError, KeyError, ValidationError):
            cached = None
        if (
            cached is not None
            and cached.source_digest == catalog.source_digest
            and cached.dims == dims
            and cached.mode == mode
        ):
            return cached, False
    index = build_embedding_index(catalog, mode, dims, provider, config)
    save_index(index, p)
    return index, True


# ---- BM25 ------------------------------------------------------------------


@dataclass
class Bm25Index:
    ids: list[str]
    doc_term_freqs: list[Counter]
    doc_lengths: list[int]
    avg_doc_length: float
    doc_freq: Counter
    k1: float = 1.5
    b: float = 0.75

    def __len__(self) -> int:
        return len(self.ids)


def build_bm25_index(docs: list[tuple[str, str]], k1: float = 1.5, b: float = 0.75) -> Bm25Index:
    """Index (id, text) docs for Okapi BM25 scoring."""
    ids = [doc_id for doc_id, _ in docs]
    term_freqs = [Counter(tokenize(text)) for _, text in docs]
    lengths = [sum(tf.values()) for tf in term_freqs]
    doc_freq: Counter = Counter()
    for tf in term_freqs:
        doc_freq.update(tf.keys())
    avg = (sum(lengths) / len(lengths)) if lengths else 0.0
    return Bm25Index(
        ids=ids,
        doc_term_freqs=term_freqs,
        doc_lengths=lengths,
        avg_doc_length=avg,
        doc_freq=doc_freq,
        k1=k1,
        b=b,
    )


def bm25_score(index: Bm25Index, query: str, doc_ordinal: int) -> float:
    """Okapi BM25 score of one document for a query.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), never negative.
    """
    if not (0 <= doc_ordinal < len(index)):
        raise ValidationError("doc_ordinal", f"out of range 0..{len(index) - 1}")
    tf = index.doc_term_freqs[doc_ordinal]
    length = index.doc_lengths[doc_ordinal]
    n_docs = len(index)
    avg = index.avg_doc_length or 1.0
    score = 0.0
    for term in tokenize(query):
        freq = tf.get(term, 0)
        if freq == 0:
            continue
        df = index.doc_freq[term]
        idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
        score += idf * (freq * (index.k1 + 1)) / (
            freq + index.k1 * (1 - index.b + index.b * length / avg)
        )
    return score


def bm25_topk(index: Bm25Index, query: str, k: int) -> list[tuple[str, float]]:
    """Top-k documents by BM25, ties broken by ascending id; zero scores included."""
    if k < 1:
        raise ValidationError("k", "must be >= 1")
    scored = [
        (index.ids[i], bm25_score(index, query, i)) for i in range(len(index))
    ]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored[: min(k, len(scored))]


# ---- embedding cache ---------------------------------------------------------


class EmbeddingCache:
    """Thread-safe LRU cache of computed embedding vectors.

    Keyed by a digest of (mode, dims, text) so the same text embedded for
    different modes or dimensions never collides. The provider is invoked
    under the cache lock, which keeps the counters exact: hits + misses =
    total lookups and provider calls = misses.
    """

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValidationError("capacity", "must be >= 1")
        self.capacity = capacity
        self._store: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(mode: str, dims: int, text: str) -> str:
        return hashlib.sha256(f"{mode}\x1f{dims}\x1f{text}".encode()).hexdigest()

    def get_or_compute(
        self, text: str, dims: int, provider: ModelProvider, mode: str = "query"
    ) -> np.ndarray:
        digest = self.key(mode, dims, text)
        with self._lock:
            if digest in self._store:
                self.hits += 1
                self._store.move_to_end(digest)
                return self._store[digest]
            self.misses += 1
            vec = provider.embed(EmbeddingRequest(texts=(text,), target_dims=dims))[0]
            self._store[digest] = vec
            if len(self._store) > self.capacity:
                self._store.popitem(last=False)
            return vec

    @property
    def total(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.total if self.total else 0.0

    def __len__(self) -> int:
        return len(self._store)


def cached_embed(
    cache: EmbeddingCache,
    text: str,
    dims: int,
    provider: ModelProvider,
    mode: str = "query",
) -> np.ndarray:
    return cache.get_or_compute(text, dims, provider, mode=mode)
