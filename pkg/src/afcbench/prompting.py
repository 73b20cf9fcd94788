"""Prompt templates and parsers for their tagged, labeled-field outputs.

Templates live as UTF-8 text files under afcbench/templates, one per prompt,
with ``{name}`` placeholders. Model outputs are expected to carry a final
``<output_format>`` block containing ``Label: value`` lines; everything here
either returns a parsed value or raises a typed PromptParseError, never
crashes on arbitrary text.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

logger = logging.getLogger(__name__)

TEMPLATE_NAMES = (
    "rewrite",
    "afc",
    "explanation_validation",
    "properties",
    "grading",
    "in_situ",
    "similarity",
)

OUTPUT_TAG = "output_format"
SCORE_MIN = 1
SCORE_MAX = 10

REWRITE_LABELS = ("Question", "Explanation", "Correct Answer")
PROPERTY_LABELS = ("Clarity", "Difficulty", "Groundedness", "Answer Giveaway")
EXPLANATION_LABELS = ("Answer Correctness", "Explanation Validity")

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


class TemplateError(ValueError):
    """Rendering failed (missing placeholder binding or unknown template)."""


class PromptParseError(ValueError):
    """Base for all model-output parsing failures; carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class TagExtractionError(PromptParseError):
    """The requested tag block is absent or unclosed."""


class MissingLabelError(PromptParseError):
    """One or more required labels were not found in the block."""

    def __init__(self, missing: list[str], raw: str = ""):
        super().__init__(f"missing labels: {', '.join(missing)}", raw)
        self.missing = missing


class ScoreParseError(PromptParseError):
    """A score field is non-numeric or outside [1, 10]."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    hash: str

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.body))


def template_hash(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    """Load a named prompt template shipped with the package."""
    if name not in TEMPLATE_NAMES:
        raise TemplateError(f"unknown template {name!r}; expected one of {TEMPLATE_NAMES}")
    body = resources.files(__package__).joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name=name, body=body, hash=template_hash(body))


def all_template_hashes() -> dict[str, str]:
    return {name: load_template(name).hash for name in TEMPLATE_NAMES}


def render(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Substitute every placeholder in the template body exactly once.

    A placeholder without a binding is an error; a binding without a
    placeholder is only a warning.
    """
    needed = template.placeholders
    missing = sorted(needed - bindings.keys())
    if missing:
        raise TemplateError(f"template {template.name!r} missing bindings for: {', '.join(missing)}")
    unused = sorted(bindings.keys() - needed)
    if unused:
        logger.warning("template %r ignoring unknown bindings: %s", template.name, ", ".join(unused))
    return _PLACEHOLDER.sub(lambda match: bindings[match.group(1)], template.body)


def extract_tagged_block(output: str, tag: str = OUTPUT_TAG) -> str:
    """Return the contents of the last well-formed <tag>...</tag> pair."""
    matches = re.findall(rf"<{re.escape(tag)}>(.*?)</{re.escape(tag)}>", output, flags=re.DOTALL)
    if not matches:
        if f"<{tag}>" in output:
            raise TagExtractionError(f"<{tag}> block is unclosed", raw=output)
        raise TagExtractionError(f"no <{tag}> block found", raw=output)
    return matches[-1].strip()


def _strip_brackets(value: str) -> str:
    value = value.strip()
    if value.startswith("[") and value.endswith("]") and len(value) >= 2:
        value = value[1:-1].strip()
    return value


def parse_labeled_fields(block: str, labels: tuple[str, ...] | list[str]) -> dict[str, str]:
    """Split a block into ``label: value`` fields.

    Label lines match case-insensitively at line start; a value runs until the
    next label line or the end of the block, and surrounding ``[ ... ]``
    brackets are stripped. When a label appears more than once the last
    occurrence wins. Missing labels raise MissingLabelError.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    patterns = [
        (label, re.compile(rf"^\s*{re.escape(label)}\s*:\s*(.*)$", re.IGNORECASE))
        for label in labels
    ]
    values: dict[str, str] = {}
    current: str | None = None
    chunks: list[str] = []

    def flush() -> None:
        if current is not None:
            values[current] = _strip_brackets("\n".join(chunks).strip())

    for line in block.splitlines():
        for label, pattern in patterns:
            match = pattern.match(line)
            if match:
                flush()
                current = label.lower()
                chunks = [match.group(1)]
                break
        else:
            if current is not None:
                chunks.append(line)
    flush()

    missing = [label for label in labels if label.lower() not in values]
    if missing:
        raise MissingLabelError(missing, raw=block)
    return values


def parse_score(value: str) -> int:
    """Parse a 1-10 rating; bracketed values and trailing prose are accepted."""
    match = re.match(r"\s*\[?\s*(-?\d+)", value)
    if not match:
        raise ScoreParseError(f"no integer found in {value!r}", raw=value)
    score = int(match.group(1))
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise ScoreParseError(f"score {score} outside [{SCORE_MIN}, {SCORE_MAX}]", raw=value)
    return score


def parse_score_block(output: str, labels: tuple[str, ...] | list[str], tag: str = OUTPUT_TAG) -> dict[str, int]:
    """Extract the output block and parse every label as an integer score."""
    block = extract_tagged_block(output, tag)
    fields = parse_labeled_fields(block, labels)
    return {label: parse_score(fields[label.lower()]) for label in labels}


@dataclass
class ParsedRewrite:
    """The three labeled fields of a rewrite output plus the raw text."""

    question: str
    explanation: str
    answer: str
    raw: str


def parse_rewrite_output(output: str) -> ParsedRewrite:
    """Parse a rewrite response into its question/explanation/answer triple."""
    block = extract_tagged_block(output)
    fields = parse_labeled_fields(block, REWRITE_LABELS)
    triple = (fields["question"], fields["explanation"], fields["correct answer"])
    empty = [label for label, value in zip(REWRITE_LABELS, triple) if not value.strip()]
    if empty:
        raise PromptParseError(f"empty rewrite fields: {', '.join(empty)}", raw=output)
    return ParsedRewrite(question=triple[0], explanation=triple[1], answer=triple[2], raw=output)


def format_rewrite_fields(question: str, explanation: str, answer: str) -> str:
    """Serialize a rewrite triple back into the labeled format."""
    return f"Question: {question}\nExplanation: {explanation}\nCorrect Answer: {answer}"
