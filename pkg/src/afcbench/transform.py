"""Answer-free context construction, grounded rewrites, and the in-situ variant."""

from __future__ import annotations

import logging

from afcbench import prompting
from afcbench.corpus import ANSWER_FREE, ContextVariant, QuestionRecord, RewriteResult
from afcbench.gateway import ChatRequest, LlmGateway, RequestDefaults

logger = logging.getLogger(__name__)

GIVEAWAY_LABEL = "Answer Giveaway"


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def contains_answer(text: str, answer: str) -> bool:
    """Case/whitespace-normalized substring check for the reference answer."""
    needle = normalize_text(answer)
    return bool(needle) and needle in normalize_text(text)


def answer_containing_variant(record: QuestionRecord) -> ContextVariant:
    """The record's own context, byte-identical, tagged answer-containing."""
    return ContextVariant(
        record_id=record.id,
        kind="answer_containing",
        text=record.context,
        generator_model="human",
    )


def build_afc(
    gateway: LlmGateway,
    record: QuestionRecord,
    model: str,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> ContextVariant:
    """Rewrite the record's context so it no longer gives away the answer.

    Raises ParseRetriesExhausted when the model never produces a non-empty
    output block; callers flag the item afc_failed and keep the raw attempts.
    """
    record.validate()
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("afc")
    prompt = prompting.render(
        template,
        {"question": record.question, "answer": record.answer, "context": record.context},
    )

    def parse(raw: str) -> str:
        text = prompting.extract_tagged_block(raw)
        if not text:
            raise prompting.PromptParseError("rewritten context is empty", raw=raw)
        return text

    text, _ = gateway.complete_parsed(defaults.request(model, prompt), parse, retries=retries)
    return ContextVariant(record_id=record.id, kind=ANSWER_FREE, text=text, generator_model=model)


def check_answer_leakage(
    gateway: LlmGateway,
    afc: ContextVariant,
    record: QuestionRecord,
    judge_model: str,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> int:
    """Judge how much the answer-free context still gives away the answer.

    Uses the question-property giveaway metric with the AFC text standing in
    the question slot. Returns the 1-10 score; callers threshold it.
    """
    if afc.kind != ANSWER_FREE:
        raise ValueError("leakage check applies to answer_free variants only")
    if afc.record_id != record.id:
        raise ValueError(f"variant {afc.record_id!r} does not belong to record {record.id!r}")
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("properties")
    prompt = prompting.render(
        template,
        {"question": afc.text, "answer": record.answer, "context": record.context},
    )

    def parse(raw: str) -> int:
        return prompting.parse_score_block(raw, (GIVEAWAY_LABEL,))[GIVEAWAY_LABEL]

    score, _ = gateway.complete_parsed(defaults.request(judge_model, prompt), parse, retries=retries)
    return score


def rewrite_question(
    gateway: LlmGateway,
    record: QuestionRecord,
    variant: ContextVariant,
    model: str,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> RewriteResult:
    """Rewrite the question for clarity, grounded in the given context variant.

    The answer-free variant is the normal pathway; passing the
    answer-containing variant is the original-context mode, and the result's
    ``grounding`` field records which one was used.
    """
    record.validate()
    variant.validate()
    if variant.record_id != record.id:
        raise ValueError(f"variant {variant.record_id!r} does not belong to record {record.id!r}")
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("rewrite")
    prompt = prompting.render(
        template,
        {"question": record.question, "answer": record.answer, "context": variant.text},
    )
    parsed, _ = gateway.complete_parsed(
        defaults.request(model, prompt), prompting.parse_rewrite_output, retries=retries
    )
    return RewriteResult(
        record_id=record.id,
        rewritten_question=parsed.question,
        rewriter_explanation=parsed.explanation,
        rewriter_answer=parsed.answer,
        rewriter_model=model,
        prompt_hash=template.hash,
        grounding=variant.kind,
        raw=parsed.raw,
    )


def render_in_situ_prompt(record: QuestionRecord, afc: ContextVariant) -> str:
    """Render the single-pass rewrite-then-answer prompt for one record."""
    if afc.kind != ANSWER_FREE:
        raise ValueError("in-situ composition requires an answer_free variant")
    if afc.record_id != record.id:
        raise ValueError(f"variant {afc.record_id!r} does not belong to record {record.id!r}")
    afc.validate()
    template = prompting.load_template("in_situ")
    return prompting.render(template, {"question": record.question, "context": afc.text})


def compose_in_situ(
    record: QuestionRecord,
    afc: ContextVariant,
    model: str,
    defaults: RequestDefaults | None = None,
    system: str | None = None,
) -> ChatRequest:
    """Build the one-shot request that rewrites and answers in a single pass."""
    defaults = defaults or RequestDefaults()
    return defaults.request(model, render_in_situ_prompt(record, afc), system=system)
