"""Benchmark record types and JSONL persistence.

Everything on disk is newline-delimited JSON, UTF-8, one object per line.
Loading a file twice yields the same in-memory ordering, and persisting then
reloading a list of records reproduces it field for field.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

ANSWER_CONTAINING = "answer_containing"
ANSWER_FREE = "answer_free"
CONTEXT_KINDS = (ANSWER_CONTAINING, ANSWER_FREE)


class InvariantError(ValueError):
    """A record violates one of its declared invariants."""


class DatasetError(RuntimeError):
    """A dataset file cannot be loaded (strict mode or unreadable file)."""


@dataclass
class LoadIssue:
    """One per-line problem found while loading a dataset file."""

    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


def _require_text(obj, name: str) -> None:
    value = getattr(obj, name)
    if not isinstance(value, str) or not value.strip():
        raise InvariantError(f"{name} must be non-empty text")


@dataclass
class QuestionRecord:
    """One benchmark item: question, reference answer, and grounding context."""

    id: str
    question: str
    answer: str
    context: str
    dataset_name: str
    release_date: str | None = None

    def validate(self) -> None:
        _require_text(self, "id")
        _require_text(self, "question")
        _require_text(self, "answer")
        _require_text(self, "context")
        _require_text(self, "dataset_name")
        if self.release_date is not None and not isinstance(self.release_date, str):
            raise InvariantError("release_date must be a string or absent")

    def to_json(self) -> dict:
        obj = asdict(self)
        if obj["release_date"] is None:
            del obj["release_date"]
        return obj


@dataclass
class ContextVariant:
    """A context string tagged as answer-containing or answer-free."""

    record_id: str
    kind: str
    text: str
    generator_model: str

    def validate(self) -> None:
        _require_text(self, "record_id")
        if self.kind not in CONTEXT_KINDS:
            raise InvariantError(f"kind must be one of {CONTEXT_KINDS}, got {self.kind!r}")
        _require_text(self, "text")
        _require_text(self, "generator_model")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RewriteResult:
    """A rewritten question plus the rewriter's explanation and answer.

    The rewriter's answer is retained for validation only; grading always uses
    the dataset's reference answer.
    """

    record_id: str
    rewritten_question: str
    rewriter_explanation: str
    rewriter_answer: str
    rewriter_model: str
    prompt_hash: str
    grounding: str = ANSWER_FREE
    raw: str = ""

    def validate(self) -> None:
        _require_text(self, "record_id")
        _require_text(self, "rewritten_question")
        _require_text(self, "rewriter_explanation")
        _require_text(self, "rewriter_answer")
        _require_text(self, "rewriter_model")
        _require_text(self, "prompt_hash")
        if self.grounding not in CONTEXT_KINDS:
            raise InvariantError(f"grounding must be one of {CONTEXT_KINDS}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RunManifest:
    """Provenance for one run directory: config hash, models, prompt hashes."""

    run_id: str
    config_hash: str
    model_names: list[str]
    prompt_hashes: dict[str, str]
    thresholds: dict[str, float]
    created_at: str

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def _from_obj(cls, obj: dict):
    if not isinstance(obj, dict):
        raise InvariantError("expected a JSON object")
    names = {f.name for f in fields(cls)}
    required = {
        f.name for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING
    }
    unknown = sorted(set(obj) - names)
    if unknown:
        raise InvariantError(f"unknown keys: {unknown}")
    missing = sorted(required - set(obj))
    if missing:
        raise InvariantError(f"missing keys: {missing}")
    record = cls(**obj)
    record.validate()
    return record


def load_dataset(path: Path | str, strict: bool = False) -> tuple[list[QuestionRecord], list[LoadIssue]]:
    """Load benchmark records from a JSONL file.

    Returns the records that pass their invariants plus a list of per-line
    issues (malformed JSON, schema violations, duplicate ids). With
    strict=True the first issue raises DatasetError instead.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise DatasetError(f"cannot read dataset {path}: {err}") from err

    records: list[QuestionRecord] = []
    issues: list[LoadIssue] = []
    seen: dict[str, int] = {}

    def report(line_no: int, message: str) -> None:
        issue = LoadIssue(line_no, message)
        if strict:
            raise DatasetError(f"{path}: {issue}")
        issues.append(issue)

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            report(line_no, f"malformed JSON: {err.msg}")
            continue
        try:
            record = _from_obj(QuestionRecord, obj)
        except (InvariantError, TypeError) as err:
            report(line_no, str(err))
            continue
        if record.id in seen:
            report(line_no, f"duplicate id {record.id!r} (first seen on line {seen[record.id]})")
            continue
        seen[record.id] = line_no
        records.append(record)
    return records, issues


def persist_jsonl(records, path: Path | str) -> int:
    """Write records (objects with validate/to_json) as canonical JSONL.

    Every record is validated before anything is written; an
    invariant-violating object refuses the whole write.
    """
    path = Path(path)
    rows = []
    for record in records:
        record.validate()
        rows.append(json.dumps(record.to_json(), ensure_ascii=False))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(row + "\n")
    return len(rows)


# Alias matching the operation name used by the pipeline stages.
persist_variants = persist_jsonl


def load_jsonl(path: Path | str, cls) -> list:
    """Load a derived artifact file written by persist_jsonl."""
    path = Path(path)
    out = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(_from_obj(cls, json.loads(line)))
        except (json.JSONDecodeError, InvariantError, TypeError) as err:
            raise DatasetError(f"{path} line {line_no}: {err}") from err
    return out


def load_variants(path: Path | str) -> list[ContextVariant]:
    return load_jsonl(path, ContextVariant)


def load_rewrites(path: Path | str) -> list[RewriteResult]:
    return load_jsonl(path, RewriteResult)


def write_rows(rows: list[dict], path: Path | str) -> int:
    """Write plain dict rows (audit entries, score rows) as JSONL."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return len(rows)


def read_rows(path: Path | str) -> list[dict]:
    return [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
