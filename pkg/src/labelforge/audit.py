"""Compliance audit trail with PII masking.

Raw utterances never reach disk: the stored record carries a SHA-256 hash
of the raw text (so identical queries can be correlated) plus a masked
rendering with account numbers, card numbers, SSNs, and emails replaced by
type tokens. Masking runs before storage and is idempotent, so re-masking
an already-masked record changes nothing. The log itself is append-only
JSONL with fsync on every record; retention is enforced by an explicit
purge that archives or deletes expired records wholesale.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .clock import SYSTEM_CLOCK, Clock
from .errors import LabelForgeError


class StorageError(LabelForgeError):
    pass


@dataclass(frozen=True)
class PiiPattern:
    name: str
    regex: re.Pattern
    token: str


@dataclass(frozen=True)
class PiiPolicy:
    patterns: tuple[PiiPattern, ...]


def default_policy() -> PiiPolicy:
    """Masking patterns applied in order; earlier patterns claim their text first.

    Emails go first so digit runs inside an address cannot be half-eaten by
    the account pattern; card numbers (longer digit runs) outrank account
    numbers; the lookarounds keep digit runs from matching inside longer
    runs, which makes each pattern leftmost-longest and non-overlapping.
    """
    return PiiPolicy(
        patterns=(
            PiiPattern(
                "email",
                re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
                "⟨EMAIL⟩",
            ),
            PiiPattern(
                "card",
                re.compile(r"(?<!\d)\d{13,19}(?!\d)"),
                "⟨CARD⟩",
            ),
            PiiPattern(
                "ssn",
                re.compile(r"(?<!\d)\d{3}-\d{2}-\d{4}(?!\d)"),
                "⟨SSN⟩",
            ),
            PiiPattern(
                "account",
                re.compile(r"(?<!\d)\d{8,12}(?!\d)"),
                "⟨ACCT⟩",
            ),
        )
    )


DEFAULT_POLICY = default_policy()


def mask(text: str, policy: PiiPolicy = DEFAULT_POLICY) -> tuple[str, int]:
    """Mask PII in text; returns (masked text, number of replacements).

    Replacement tokens contain no digits or address characters, so no
    pattern can re-match masked output and masking is idempotent.
    """
    total = 0
    for pattern in policy.patterns:
        text, count = pattern.regex.subn(pattern.token, text)
        total += count
    return text, total


def query_hash(raw_utterance: str) -> str:
    return hashlib.sha256(raw_utterance.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class AuditRecord:
    record_id: int
    timestamp_s: float
    query_hash: str
    masked_utterance: str
    result_summary: dict = field(default_factory=dict)
    agent_statuses: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "record_id": self.record_id,
                "timestamp_s": self.timestamp_s,
                "query_hash": self.query_hash,
                "masked_utterance": self.masked_utterance,
                "result_summary": self.result_summary,
                "agent_statuses": self.agent_statuses,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "AuditRecord":
        data = json.loads(line)
        return cls(
            record_id=int(data["record_id"]),
            timestamp_s=float(data["timestamp_s"]),
            query_hash=str(data["query_hash"]),
            masked_utterance=str(data["masked_utterance"]),
            result_summary=data.get("result_summary", {}),
            agent_statuses=data.get("agent_statuses", {}),
        )


class AuditLog:
    """Append-only JSONL audit log with strictly increasing record ids."""

    def __init__(
        self,
        path: str | Path,
        clock: Clock = SYSTEM_CLOCK,
        policy: PiiPolicy = DEFAULT_POLICY,
    ):
        self.path = Path(path)
        self.policy = policy
        self._clock = clock
        self._lock = threading.Lock()
        self._next_id = 1
        if self.path.exists():
            for record in self.read_all():
                self._next_id = max(self._next_id, record.record_id + 1)

    def append(
        self,
        raw_utterance: str,
        result_summary: dict | None = None,
        agent_statuses: dict | None = None,
    ) -> AuditRecord:
        """Mask, hash, and durably append one record; returns what was stored."""
        masked, _count = mask(raw_utterance, self.policy)
        with self._lock:
            record = AuditRecord(
                record_id=self._next_id,
                timestamp_s=self._clock.now_s(),
                query_hash=query_hash(raw_utterance),
                masked_utterance=masked,
                result_summary=result_summary or {},
                agent_statuses=agent_statuses or {},
            )
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageError(f"{self.path}: {exc}") from exc
            self._next_id += 1
            return record

    def read_all(self) -> list[AuditRecord]:
        if not self.path.exists():
            return []
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StorageError(f"{self.path}: {exc}") from exc
        return [AuditRecord.from_json(line) for line in lines if line.strip()]

    def purge(
        self,
        retention_days: int = 90,
        archive: bool = False,
        now_s: float | None = None,
    ) -> int:
        """Drop records strictly older than the retention window.

        With archive=True the dropped records are appended to a sidecar
        cold file before removal. Returns the number of records purged.
        Record ids keep increasing across purges; the sequence never resets.
        """
        if retention_days < 1:
            raise StorageError("retention_days must be >= 1")
        cutoff = (now_s if now_s is not None else self._clock.now_s()) - retention_days * 86400.0
        with self._lock:
            records = self.read_all()
            keep = [r for r in records if r.timestamp_s >= cutoff]
            drop = [r for r in records if r.timestamp_s < cutoff]
            if not drop:
                return 0
            try:
                if archive:
                    with open(self.path.with_suffix(self.path.suffix + ".cold"), "a",
                              encoding="utf-8") as fh:
                        for record in drop:
                            fh.write(record.to_json() + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                with open(tmp, "w", encoding="utf-8") as fh:
                    for record in keep:
                        fh.write(record.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.path)
            except OSError as exc:
                raise StorageError(f"{self.path}: {exc}") from exc
            return len(drop)
