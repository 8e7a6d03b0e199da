"""Catalog and training-data ingestion.

The catalog is the set of annotations the engine can assign (FAQ entries,
intents, ...), loaded from JSONL or CSV using the column names declared in
the config. Training examples pair historical utterances with their gold
annotation and feed few-shot prompt blocks.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .config import AnnotationConfig
from .errors import LabelForgeError, ParseError, ValidationError


class DuplicateId(LabelForgeError):
    def __init__(self, entry_id: str):
        self.entry_id = entry_id
        super().__init__(f"duplicate catalog id {entry_id!r}")


class MissingColumn(LabelForgeError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing column {column!r}")


@dataclass(frozen=True)
class AnnotationEntry:
    """One catalog row: the assignable annotation."""

    id: str
    primary_text: str
    secondary_text: str | None = None


@dataclass(frozen=True)
class TrainingExample:
    """A labeled utterance used for few-shot prompting."""

    utterance: str
    gold_id: str
    # optional ranked alternatives: (annotation id, score 0-100, reasoning)
    ranked_alternatives: tuple[tuple[str, int, str], ...] = ()


@dataclass(frozen=True)
class Catalog:
    entries: tuple[AnnotationEntry, ...]
    by_id: dict[str, AnnotationEntry] = field(compare=False)
    source_digest: str = ""
    # 1-based data-row numbers skipped because the primary column was empty
    rejected_rows: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class EmbeddingText:
    """Text to embed for an entry, plus whether full_context fell back."""

    text: str
    used_fallback: bool = False


def ingest_catalog(path: str | Path, config: AnnotationConfig) -> Catalog:
    """Load a catalog file (JSONL or CSV, chosen by extension).

    Entry ids come from an ``id`` column when present, otherwise they are
    synthesized as zero-padded row ordinals so reruns over the same file
    produce the same ids. Rows with an empty primary column are skipped and
    reported via Catalog.rejected_rows.
    """
    p = Path(path)
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    digest = hashlib.sha256(blob).hexdigest()
    text = blob.decode("utf-8")
    if p.suffix.lower() == ".csv":
        rows = _csv_rows(text, config)
    else:
        rows = _jsonl_rows(text, config)

    entries: list[AnnotationEntry] = []
    by_id: dict[str, AnnotationEntry] = {}
    rejected: list[int] = []
    for ordinal, (row_no, row) in enumerate(rows):
        primary = _clean(row.get(config.primary_column))
        if not primary:
            rejected.append(row_no)
            continue
        secondary = None
        if config.secondary_column:
            secondary = _clean(row.get(config.secondary_column)) or None
        entry_id = _clean(row.get("id")) or f"{ordinal:04d}"
        if entry_id in by_id:
            raise DuplicateId(entry_id)
        entry = AnnotationEntry(id=entry_id, primary_text=primary, secondary_text=secondary)
        by_id[entry_id] = entry
        entries.append(entry)
    return Catalog(
        entries=tuple(entries),
        by_id=by_id,
        source_digest=digest,
        rejected_rows=tuple(rejected),
    )


def _csv_rows(text: str, config: AnnotationConfig) -> list[tuple[int, dict]]:
    reader = csv.DictReader(text.splitlines())
    header = reader.fieldnames or []
    if config.primary_column not in header:
        raise MissingColumn(config.primary_column)
    return [(i, row) for i, row in enumerate(reader, start=1)]


def _jsonl_rows(text: str, config: AnnotationConfig) -> list[tuple[int, dict]]:
    rows: list[tuple[int, dict]] = []
    saw_primary = False
    for line_no, line in enumerate(_nonempty_lines(text), start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {line_no}: invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise ParseError(f"line {line_no}: expected an object")
        if config.primary_column in obj:
            saw_primary = True
        rows.append((line_no, obj))
    if rows and not saw_primary:
        raise MissingColumn(config.primary_column)
    return rows


def _nonempty_lines(text: str) -> Iterable[str]:
    return (line for line in text.splitlines() if line.strip())


def _clean(value) -> str:
    if value is None:
        return ""
    return str(value).strip()


def load_training(path: str | Path, catalog: Catalog) -> list[TrainingExample]:
    """Load training examples (JSONL), rejecting dangling annotation ids.

    Every referenced id must resolve against the catalog; the error lists
    all dangling references at once so a bad export is fixable in one pass.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    examples: list[TrainingExample] = []
    dangling: list[str] = []
    for line_no, line in enumerate(_nonempty_lines(text), start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {line_no}: invalid JSON ({exc})") from exc
        utterance = _clean(obj.get("utterance"))
        gold_id = _clean(obj.get("gold_id"))
        if not utterance:
            raise ValidationError("utterance", f"line {line_no}: must be non-empty")
        if not gold_id:
            raise ValidationError("gold_id", f"line {line_no}: must be non-empty")
        if gold_id not in catalog.by_id:
            dangling.append(gold_id)
        alternatives = []
        for alt in obj.get("ranked_alternatives", []) or []:
            alt_id = _clean(alt.get("id"))
            if alt_id not in catalog.by_id:
                dangling.append(alt_id)
            alternatives.append((alt_id, int(alt.get("score", 0)), _clean(alt.get("reasoning"))))
        examples.append(
            TrainingExample(
                utterance=utterance,
                gold_id=gold_id,
                ranked_alternatives=tuple(alternatives),
            )
        )
    if dangling:
        raise ValidationError("gold_id", f"dangling annotation ids: {sorted(set(dangling))}")
    return examples


def embedding_text(
    entry: AnnotationEntry, mode: str, config: AnnotationConfig
) -> EmbeddingText:
    """Render the text embedded for an entry under the given mode.

    primary_only embeds the primary text verbatim. full_context joins both
    columns with labeled fields; FAQ-type configs keep the literal
    Question/Answer labels, other types label fields by their column names.
    An entry without secondary text falls back to primary_only and says so.
    """
    if mode == "primary_only":
        return EmbeddingText(entry.primary_text)
    if mode != "full_context":
        raise ValidationError("mode", f"unknown embedding mode {mode!r}")
    if not entry.secondary_text:
        return EmbeddingText(entry.primary_text, used_fallback=True)
    if config.is_faq:
        primary_label, secondary_label = "Question", "Answer"
    else:
        primary_label = config.primary_column.capitalize()
        secondary_label = (config.secondary_column or "detail").capitalize()
    return EmbeddingText(
        f"{primary_label}: {entry.primary_text} {secondary_label}: {entry.secondary_text}"
    )
