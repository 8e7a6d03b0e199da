"""Model providers: the seam between the engine and any LLM backend.

Two implementations ship: an HTTP provider speaking a generic
chat-completions wire schema, and a deterministic mock. The mock is the
test substrate — every response is a pure function of (system prompt, user
prompt, temperature, seed), embeddings are seeded pseudo-random unit
vectors, and fault rules let tests inject latency and failures per call.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .clock import SYSTEM_CLOCK, Clock
from .errors import LabelForgeError, ValidationError


class ProviderError(LabelForgeError):
    """Transient provider failure; safe to retry."""


class FatalProviderError(LabelForgeError):
    """Non-retryable provider failure (bad request, auth, ...)."""


class Timeout(LabelForgeError):
    """The call could not complete within its deadline."""


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.1
    max_output_chars: int = 16384
    deadline_ms: float = 2000.0

    def __post_init__(self):
        if not (0.0 <= self.temperature <= 2.0):
            raise ValidationError("temperature", "must be in [0, 2]")
        if self.max_output_chars < 1:
            raise ValidationError("max_output_chars", "must be >= 1")
        if self.deadline_ms <= 0:
            raise ValidationError("deadline_ms", "must be positive")


@dataclass
class ChatResponse:
    text: str
    latency_ms: float = 0.0
    provider_meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EmbeddingRequest:
    texts: tuple[str, ...]
    target_dims: int

    def __post_init__(self):
        if not self.texts:
            raise ValidationError("texts", "must be non-empty")
        if self.target_dims < 1:
            raise ValidationError("target_dims", "must be >= 1")


@runtime_checkable
class ModelProvider(Protocol):
    provider_kind: str
    native_dims: int

    def complete(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, request: EmbeddingRequest) -> list[np.ndarray]: ...


def with_retry(
    op: Callable[[], ChatResponse],
    max_retries: int,
    base_delay_ms: float = 250.0,
    clock: Clock = SYSTEM_CLOCK,
):
    """Run op, retrying transient ProviderErrors with exponential backoff.

    Delays double each attempt (d, 2d, 4d, ...). Timeouts and fatal errors
    propagate immediately — retrying a deadline overrun inside the same
    deadline only makes the overrun worse.
    """
    delay = base_delay_ms
    attempt = 0
    while True:
        attempt += 1
        try:
            return op()
        except ProviderError:
            if attempt > max_retries:
                raise
            clock.sleep_ms(delay)
            delay *= 2.0


@dataclass
class FaultRule:
    """Injects latency or a failure into mock calls whose prompt matches.

    `match` is a substring searched in the concatenated system and user
    prompts; an empty match hits every call. `times` limits how many calls
    the rule consumes before expiring (None = unlimited).
    """

    match: str = ""
    delay_ms: float = 0.0
    fail: str | None = None  # None | "timeout" | "provider" | "fatal"
    times: int | None = None


# Prompt-section markers the mock parses. The prompt builders in
# `prompting` emit exactly these shapes, which keeps the mock a pure
# function of the rendered prompt text rather than of hidden side channels.
_CANDIDATE_LINE = re.compile(r"^\[([^\]\n]+)\] (.+)$", re.MULTILINE)
_USER_LINE = re.compile(r"^User ([A-Za-z_][\w ]*): \"(.*)\"$", re.MULTILINE)
_EXPANDED_LINE = re.compile(r"^Expanded query: \"(.*)\"$", re.MULTILINE)
_QUOTED_LINE = re.compile(r"^\"(.*)\"$", re.MULTILINE)
_JUDGE_CANDIDATE = re.compile(
    r"^\[([^\]\n]+)\] (.+) \(support=(\d+); scores: ([^)]*)\)$", re.MULTILINE
)

_WORD_RE = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    return set(_WORD_RE.findall(text.lower()))


# Canned query expansions for demo utterances; anything else gets a generic
# "<query>, <query> details, ..." expansion that keeps the original tokens.
MOCK_EXPANSIONS = {
    "cash back": "cash back policies, cash back offers, cash back rewards, "
    "how to earn cash back, cash back credit cards",
    "lost deb": "lost debit card, stolen card, lock card, report missing card, block card",
    "lost deb ca": "lost debit card, stolen card, lock card, report missing card, block card",
    "how much money do i have": "account balance, available funds, account preview, "
    "how much money is in my account",
}


class MockProvider:
    """Deterministic stand-in for a hosted model.

    Detects the prompt kind (planner / ranker / judge) from the rendered
    prompt, parses the candidates and utterance back out of it, and emits
    schema-valid JSON with scores derived from a seeded hash — so consensus
    and routing tests get stable, controllable inputs. A corruption mode
    wraps ranker/judge payloads in malformed variants for parser tests.
    """

    def __init__(
        self,
        seed: int = 0,
        clock: Clock = SYSTEM_CLOCK,
        corruption: str | None = None,
        fault_rules: Sequence[FaultRule] = (),
        native_dims: int = 3072,
    ):
        self.provider_kind = "mock"
        self.seed = seed
        self.native_dims = native_dims
        self.corruption = corruption
        self._clock = clock
        self._rules = list(fault_rules)
        self._lock = threading.Lock()
        self.complete_calls = 0
        self.embed_calls = 0
        self.embedded_texts = 0
        self.inflight = 0
        self.max_inflight = 0

    # ---- bookkeeping -----------------------------------------------------

    def _enter(self) -> None:
        with self._lock:
            self.complete_calls += 1
            self.inflight += 1
            self.max_inflight = max(self.max_inflight, self.inflight)

    def _exit(self) -> None:
        with self._lock:
            self.inflight -= 1

    def _consume_rule(self, request: ChatRequest) -> FaultRule | None:
        haystack = request.system_prompt + "\n" + request.user_prompt
        with self._lock:
            for rule in self._rules:
                if rule.match in haystack and (rule.times is None or rule.times > 0):
                    if rule.times is not None:
                        rule.times -= 1
                    return rule
        return None

    # ---- chat ------------------------------------------------------------

    def complete(self, request: ChatRequest) -> ChatResponse:
        self._enter()
        try:
            latency = 0.0
            rule = self._consume_rule(request)
            if rule is not None:
                if rule.fail == "timeout" or rule.delay_ms > request.deadline_ms:
                    raise Timeout(
                        f"mock call exceeded deadline ({max(rule.delay_ms, request.deadline_ms)}ms"
                        f" > {request.deadline_ms}ms)"
                    )
                if rule.fail == "provider":
                    raise ProviderError("injected transient failure")
                if rule.fail == "fatal":
                    raise FatalProviderError("injected fatal failure")
                if rule.delay_ms > 0:
                    self._clock.sleep_ms(rule.delay_ms)
                    latency = rule.delay_ms
            text = self._render(request)
            return ChatResponse(
                text=text[: request.max_output_chars],
                latency_ms=latency,
                provider_meta={"provider": "mock", "seed": self.seed},
            )
        finally:
            self._exit()

    def _render(self, request: ChatRequest) -> str:
        system = request.system_prompt
        if "planning retrieval strategies" in system:
            return self._render_plan(request)
        if "expert judge" in system:
            return self._corrupt(self._render_judge(request))
        return self._corrupt(self._render_ranking(request))

    def _jitter(self, *parts, mod: int) -> int:
        key = "\x1f".join(str(p) for p in parts)
        digest = hashlib.sha256(f"{self.seed}|{key}".encode()).digest()
        return int.from_bytes(digest[:8], "big") % mod

    def _render_plan(self, request: ChatRequest) -> str:
        match = _QUOTED_LINE.search(request.user_prompt)
        query = match.group(1) if match else ""
        normalized = query.strip().lower()
        if not re.search(r"[a-z]", normalized):
            expanded, needs = query, False
            reasoning = "No alphabetic content; treating the query as a literal identifier."
        elif normalized in MOCK_EXPANSIONS:
            expanded, needs = MOCK_EXPANSIONS[normalized], True
            reasoning = "Short or abbreviated query; expanded with related phrasings."
        else:
            expanded, needs = f"{query}, {query} details, {query} support options", True
            reasoning = "Expanded the query with generic related phrasings."
        plan = {
            "intent": f"Find the annotation matching: {query}",
            "needs_expansion": needs,
            "expanded_query": expanded,
            "reasoning": reasoning,
        }
        return json.dumps(plan)

    def _render_ranking(self, request: ChatRequest) -> str:
        candidates = _CANDIDATE_LINE.findall(request.user_prompt)
        user_matches = _USER_LINE.findall(request.user_prompt)
        utterance = user_matches[-1][1] if user_matches else ""
        expanded_match = _EXPANDED_LINE.findall(request.user_prompt)
        query_tokens = _tokens(utterance)
        if expanded_match:
            query_tokens |= _tokens(expanded_match[-1])

        scored = []
        for cand_id, title in candidates:
            overlap = len(_tokens(title) & query_tokens)
            jitter = self._jitter(request.temperature, utterance, cand_id, mod=22)
            score = min(100, 35 + 14 * min(overlap, 4) + jitter)
            scored.append((score, cand_id, title))
        scored.sort(key=lambda item: (-item[0], item[1]))
        top = scored[:5]
        if top and top[0][0] >= 85:
            confidence = "HIGH"
        elif top and top[0][0] >= 60:
            confidence = "MEDIUM"
        else:
            confidence = "LOW"
        verdict = {
            "user_utterance": utterance,
            "intent_analysis": f"The user appears to be asking about: {utterance}",
            "relevant_annotations": [
                {
                    "annotation": title,
                    "relevance_score": score,
                    "reasoning": f"Token and intent overlap with \"{utterance}\".",
                }
                for score, _cand_id, title in top
            ],
            "confidence": confidence,
            "explanation_of_confidence": f"Top relevance score {top[0][0]}."
            if top
            else "No candidates available.",
        }
        return json.dumps(verdict)

    def _render_judge(self, request: ChatRequest) -> str:
        rows = _JUDGE_CANDIDATE.findall(request.user_prompt)
        user_matches = _USER_LINE.findall(request.user_prompt)
        utterance = user_matches[-1][1] if user_matches else ""
        combined = []
        supports = []
        agent_names: set[str] = set()
        for cand_id, title, support, score_csv in rows:
            scores = []
            for part in score_csv.split(", "):
                if "=" in part:
                    name, value = part.split("=", 1)
                    agent_names.add(name)
                    scores.append(float(value))
            jitter = self._jitter("judge", utterance, cand_id, mod=7)
            combined.append((sum(scores) + jitter, cand_id, title, int(support)))
            supports.append(int(support))
        combined.sort(key=lambda item: (-item[0], item[1]))
        top = combined[:5]
        max_raw = top[0][0] if top else 1.0
        ranked = [
            {
                "annotation": title,
                "final_score": int(round(100.0 * raw / max_raw)) if max_raw else 0,
                "reasoning": f"{support} of {max(len(agent_names), 1)} agents agree on this candidate.",
            }
            for raw, _cand_id, title, support in top
        ]
        max_support = max(supports) if supports else 0
        consensus = "STRONG" if max_support >= 3 else "MODERATE" if max_support == 2 else "WEAK"
        top_final = ranked[0]["final_score"] if ranked else 0
        top_support = top[0][3] if top else 0
        if top_final >= 85 and top_support >= 2:
            confidence = "HIGH"
        elif top_final >= 60:
            confidence = "MEDIUM"
        else:
            confidence = "LOW"
        return json.dumps(
            {
                "reranked_annotations": ranked,
                "consensus_strength": consensus,
                "confidence": confidence,
            }
        )

    def _corrupt(self, payload: str) -> str:
        if self.corruption is None:
            return payload
        if self.corruption == "chatty":
            return (
                "Sure! Based on my analysis, here is the ranking you asked for:\n"
                + payload
                + "\nLet me know if you need anything else."
            )
        if self.corruption == "fenced":
            # Trailing smiley adds a brace outside the fence, so brace-span
            # extraction fails and recovery has to go through fence stripping.
            return "```json\n" + payload + "\n```\nHope this helps! :-}"
        if self.corruption == "truncated":
            return payload[: max(1, int(len(payload) * 0.6))]
        if self.corruption == "garbage":
            return "I could not produce a ranking this time, sorry."
        raise ValidationError("corruption", f"unknown corruption mode {self.corruption!r}")

    # ---- embeddings --------------------------------------------------------

    def embed(self, request: EmbeddingRequest) -> list[np.ndarray]:
        if request.target_dims > self.native_dims:
            raise ValidationError(
                "target_dims", f"{request.target_dims} exceeds native {self.native_dims}"
            )
        with self._lock:
            self.embed_calls += 1
            self.embedded_texts += len(request.texts)
        out = []
        for text in request.texts:
            digest = hashlib.sha256(f"{self.seed}|{text}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            vec = rng.standard_normal(self.native_dims)
            vec /= np.linalg.norm(vec)
            prefix = vec[: request.target_dims]
            out.append(prefix / np.linalg.norm(prefix))
        return out


class HttpProvider:
    """Provider speaking a generic chat-completions / embeddings HTTP API.

    Connection settings come from the environment (LABELFORGE_API_URL,
    LABELFORGE_API_KEY, LABELFORGE_CHAT_MODEL, LABELFORGE_EMBED_MODEL,
    LABELFORGE_NATIVE_DIMS) so secrets stay out of config files.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        chat_model: str = "gpt-4o",
        embed_model: str = "text-embedding-3-large",
        native_dims: int = 3072,
        clock: Clock = SYSTEM_CLOCK,
        transport: httpx.BaseTransport | None = None,
    ):
        self.provider_kind = "http"
        self.base_url = base_url.rstrip("/")
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.native_dims = native_dims
        self._clock = clock
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(headers=headers, transport=transport)

    @classmethod
    def from_env(cls, clock: Clock = SYSTEM_CLOCK) -> "HttpProvider":
        url = os.environ.get("LABELFORGE_API_URL", "")
        if not url:
            raise ValidationError("LABELFORGE_API_URL", "must be set for the http provider")
        return cls(
            base_url=url,
            api_key=os.environ.get("LABELFORGE_API_KEY", ""),
            chat_model=os.environ.get("LABELFORGE_CHAT_MODEL", "gpt-4o"),
            embed_model=os.environ.get("LABELFORGE_EMBED_MODEL", "text-embedding-3-large"),
            native_dims=int(os.environ.get("LABELFORGE_NATIVE_DIMS", "3072")),
            clock=clock,
        )

    def complete(self, request: ChatRequest) -> ChatResponse:
        started = self._clock.monotonic_ms()
        payload = {
            "model": self.chat_model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
        }
        try:
            response = self._client.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                timeout=request.deadline_ms / 1000.0,
            )
        except httpx.TimeoutException as exc:
            raise Timeout(f"chat call exceeded {request.deadline_ms}ms") from exc
        except httpx.HTTPError as exc:
            raise ProviderError(str(exc)) from exc
        self._raise_for_status(response)
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"malformed chat response: {exc}") from exc
        return ChatResponse(
            text=text[: request.max_output_chars],
            latency_ms=self._clock.monotonic_ms() - started,
            provider_meta={"provider": "http", "model": self.chat_model},
        )

    def embed(self, request: EmbeddingRequest) -> list[np.ndarray]:
        if request.target_dims > self.native_dims:
            raise ValidationError(
                "target_dims", f"{request.target_dims} exceeds native {self.native_dims}"
            )
        try:
            response = self._client.post(
                f"{self.base_url}/embeddings",
                json={"model": self.embed_model, "input": list(request.texts)},
                timeout=30.0,
            )
        except httpx.TimeoutException as exc:
            raise Timeout("embedding call timed out") from exc
        except httpx.HTTPError as exc:
            raise ProviderError(str(exc)) from exc
        self._raise_for_status(response)
        try:
            rows = [item["embedding"] for item in response.json()["data"]]
        except (KeyError, ValueError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc}") from exc
        out = []
        for row in rows:
            vec = np.asarray(row, dtype=np.float64)
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec = vec / norm
            prefix = vec[: request.target_dims]
            prefix_norm = np.linalg.norm(prefix)
            if prefix_norm < 1e-12:
                raise ProviderError("embedding prefix is degenerate")
            out.append(prefix / prefix_norm)
        return out

    @staticmethod
    def _raise_for_status(response: httpx.Response) -> None:
        if response.status_code == 429 or response.status_code >= 500:
            raise ProviderError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise FatalProviderError(f"HTTP {response.status_code}")


def make_provider(kind: str, seed: int = 0, clock: Clock = SYSTEM_CLOCK) -> ModelProvider:
    if kind == "mock":
        return MockProvider(seed=seed, clock=clock)
    if kind == "http":
        return HttpProvider.from_env(clock=clock)
    raise ValidationError("provider", f"unknown provider kind {kind!r}")


def mock_latency_rules(agent_delays: dict[str, float]) -> list[FaultRule]:
    """Build delay rules keyed on the per-agent emphasis marker in prompts."""
    return [FaultRule(match=marker, delay_ms=delay) for marker, delay in agent_delays.items()]
