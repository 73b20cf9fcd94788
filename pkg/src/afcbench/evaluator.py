"""The six-condition answer-accuracy matrix and its grading rules."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from afcbench import prompting, transform
from afcbench.corpus import ContextVariant, QuestionRecord, RewriteResult
from afcbench.gateway import ChatResponse, LlmGateway, ParseRetriesExhausted, RequestDefaults

logger = logging.getLogger(__name__)

ORIG_Q = "orig_q"
ORIG_Q_CTX = "orig_q_ctx"
ORIG_Q_AFC = "orig_q_afc"
REWRITE_Q = "rewrite_q"
REWRITE_Q_AFC = "rewrite_q_afc"
IN_SITU = "in_situ"

CONDITIONS = (ORIG_Q, ORIG_Q_CTX, ORIG_Q_AFC, REWRITE_Q, REWRITE_Q_AFC, IN_SITU)

# Fixed minimal answering wrapper so the condition variable stays isolated to
# the user prompt.
ANSWER_SYSTEM_MESSAGE = "Answer the question concisely."

FLAG_GRADE_UNPARSEABLE = "grade_unparseable"

_GRADE_VERDICT = re.compile(r"^\s*correct\s*:\s*(yes|no)\b", re.IGNORECASE | re.MULTILINE)


@dataclass
class EvalOutcome:
    """One (model, dataset, condition, question) trial."""

    record_id: str
    dataset: str
    condition: str
    eval_model: str
    prompt: str
    raw_answer: str
    correct: bool
    grader_model: str
    flags: list[str] = field(default_factory=list)
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0

    def validate(self) -> None:
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if not self.record_id or not self.eval_model:
            raise ValueError("record_id and eval_model must be non-empty")

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "dataset": self.dataset,
            "condition": self.condition,
            "eval_model": self.eval_model,
            "prompt": self.prompt,
            "raw_answer": self.raw_answer,
            "correct": self.correct,
            "grader_model": self.grader_model,
            "flags": list(self.flags),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_ms": self.latency_ms,
        }


@dataclass
class AccuracyCell:
    n: int
    correct: int

    @property
    def value(self) -> float:
        return self.correct / self.n


def compose_condition_prompt(
    record: QuestionRecord,
    condition: str,
    rewrite: RewriteResult | None = None,
    afc: ContextVariant | None = None,
) -> str:
    """Compose the user prompt for one condition.

    Context, when present, precedes the question separated by a blank line.
    The rewrite_q condition is the rewritten question alone and never includes
    the answer-free context.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    if condition in (REWRITE_Q, REWRITE_Q_AFC) and rewrite is None:
        raise ValueError(f"condition {condition} requires a rewrite")
    if condition in (ORIG_Q_AFC, REWRITE_Q_AFC, IN_SITU) and afc is None:
        raise ValueError(f"condition {condition} requires an answer-free context")

    if condition == ORIG_Q:
        return record.question
    if condition == ORIG_Q_CTX:
        return f"{record.context}\n\n{record.question}"
    if condition == ORIG_Q_AFC:
        return f"{afc.text}\n\n{record.question}"
    if condition == REWRITE_Q:
        return rewrite.rewritten_question
    if condition == REWRITE_Q_AFC:
        return f"{afc.text}\n\n{rewrite.rewritten_question}"
    return transform.render_in_situ_prompt(record, afc)


def answer(
    gateway: LlmGateway, prompt: str, eval_model: str, defaults: RequestDefaults | None = None
) -> ChatResponse:
    """Ask the model under evaluation; the raw text is retained verbatim."""
    if not prompt.strip():
        raise ValueError("prompt must be non-empty")
    defaults = defaults or RequestDefaults()
    return gateway.complete(defaults.request(eval_model, prompt, system=ANSWER_SYSTEM_MESSAGE))


def graded_text(condition: str, raw_answer: str) -> str:
    """The text that gets graded; in_situ uses the Final Answer field when parseable."""
    if condition != IN_SITU:
        return raw_answer
    try:
        block = prompting.extract_tagged_block(raw_answer)
    except prompting.TagExtractionError:
        block = raw_answer
    try:
        fields = prompting.parse_labeled_fields(block, ("Final Answer",))
    except prompting.PromptParseError:
        return raw_answer
    value = fields["final answer"]
    return value if value.strip() else raw_answer


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def parse_grade(raw: str) -> bool:
    matches = _GRADE_VERDICT.findall(raw)
    if not matches:
        raise prompting.PromptParseError("no 'Correct: yes|no' verdict found", raw=raw)
    return matches[-1].lower() == "yes"


def grade(
    gateway: LlmGateway,
    record: QuestionRecord,
    candidate: str,
    grader_model: str,
    question: str | None = None,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> tuple[bool, list[str]]:
    """Grade a candidate answer against the dataset's reference answer.

    A normalized exact match short-circuits to correct without a judge call.
    Otherwise the judge sees the question actually asked, the reference
    answer, and the candidate; an unparseable verdict after retries counts as
    incorrect and is flagged.
    """
    if not record.answer.strip():
        raise ValueError("record has no reference answer")
    if normalize_answer(candidate) == normalize_answer(record.answer):
        return True, []
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("grading")
    prompt = prompting.render(
        template,
        {"question": question or record.question, "answer": record.answer, "model_answer": candidate},
    )
    try:
        verdict, _ = gateway.complete_parsed(
            defaults.request(grader_model, prompt), parse_grade, retries=retries
        )
    except ParseRetriesExhausted:
        return False, [FLAG_GRADE_UNPARSEABLE]
    return verdict, []


def evaluate_record(
    gateway: LlmGateway,
    record: QuestionRecord,
    condition: str,
    eval_model: str,
    grader_model: str,
    rewrite: RewriteResult | None = None,
    afc: ContextVariant | None = None,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> EvalOutcome:
    """Run one trial: compose, answer, grade."""
    prompt = compose_condition_prompt(record, condition, rewrite=rewrite, afc=afc)
    response = answer(gateway, prompt, eval_model, defaults=defaults)
    candidate = graded_text(condition, response.content)
    asked = rewrite.rewritten_question if condition in (REWRITE_Q, REWRITE_Q_AFC) else record.question
    correct, flags = grade(
        gateway, record, candidate, grader_model, question=asked, defaults=defaults, retries=retries
    )
    return EvalOutcome(
        record_id=record.id,
        dataset=record.dataset_name,
        condition=condition,
        eval_model=eval_model,
        prompt=prompt,
        raw_answer=response.content,
        correct=correct,
        grader_model=grader_model,
        flags=flags,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
        latency_ms=response.latency_ms,
    )


def accuracy(outcomes: Iterable[EvalOutcome]) -> dict[tuple[str, str, str], AccuracyCell]:
    """Correct-count / total per (eval_model, dataset, condition) group."""
    cells: dict[tuple[str, str, str], AccuracyCell] = {}
    for outcome in outcomes:
        key = (outcome.eval_model, outcome.dataset, outcome.condition)
        cell = cells.setdefault(key, AccuracyCell(n=0, correct=0))
        cell.n += 1
        cell.correct += int(outcome.correct)
    return cells


def accuracy_values(cells: dict[tuple[str, str, str], AccuracyCell]) -> dict[tuple[str, str, str], float]:
    return {key: cell.value for key, cell in cells.items()}


def write_accuracy_csv(cells: dict[tuple[str, str, str], AccuracyCell], path: Path | str) -> None:
    """Accuracy table sorted by (eval_model, dataset, condition), 6-decimal fractions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["eval_model", "dataset", "condition", "n", "correct", "accuracy"])
        for key in sorted(cells):
            cell = cells[key]
            writer.writerow([*key, cell.n, cell.correct, f"{cell.value:.6f}"])


def read_accuracy_csv(path: Path | str) -> dict[tuple[str, str, str], AccuracyCell]:
    with open(path, newline="", encoding="utf-8") as handle:
        return {
            (row["eval_model"], row["dataset"], row["condition"]): AccuracyCell(
                n=int(row["n"]), correct=int(row["correct"])
            )
            for row in csv.DictReader(handle)
        }


def load_outcomes(path: Path | str) -> list[EvalOutcome]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(EvalOutcome(**json.loads(line)))
    return out
