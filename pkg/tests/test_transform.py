from __future__ import annotations

import pytest

from afcbench import prompting
from afcbench.corpus import ANSWER_CONTAINING, ANSWER_FREE, ContextVariant, QuestionRecord
from afcbench.gateway import ParseRetriesExhausted
from afcbench.transform import (
    answer_containing_variant,
    build_afc,
    check_answer_leakage,
    compose_in_situ,
    contains_answer,
    render_in_situ_prompt,
    rewrite_question,
)
from tests.conftest import scripted_gateway
from tests.test_prompting import ZNS_CONTEXT, ZNS_QUESTION

ZNS_REWRITE = (
    "Which portion of the electromagnetic spectrum do lasers that incorporate "
    "zinc sulfide (ZnS) crystals generally operate in?"
)


def make_afc(record: QuestionRecord, text: str) -> ContextVariant:
    return ContextVariant(record_id=record.id, kind=ANSWER_FREE, text=text, generator_model="gen")


# --- build_afc ------------------------------------------------------------


def test_build_afc_passthrough(record, afc_text):
    table = {
        "chat": [
            {
                "requires": ["rewrite the context information", record.question],
                "response": f"<document_analysis>…</document_analysis>\n<output_format>\n{afc_text}\n</output_format>",
            }
        ]
    }
    gateway, _ = scripted_gateway(table)
    afc = build_afc(gateway, record, "afc-model")
    assert afc.text == afc_text
    assert afc.kind == ANSWER_FREE
    assert afc.generator_model == "afc-model"
    assert afc.record_id == record.id


def test_build_afc_empty_block_fails_after_retries(record):
    gateway, backend = scripted_gateway(
        {"chat": [{"requires": [], "response": "<output_format></output_format>"}]}
    )
    with pytest.raises(ParseRetriesExhausted) as info:
        build_afc(gateway, record, "afc-model", retries=2)
    assert backend.chat_calls == 3
    assert len(info.value.attempts) == 3


def test_build_afc_degenerate_context_same_as_answer():
    record = QuestionRecord(
        id="q1", question="What is it?", answer="fluorite", context="fluorite", dataset_name="d"
    )
    gateway, _ = scripted_gateway(
        {"chat": [{"requires": [], "response": "<output_format>   </output_format>"}]}
    )
    with pytest.raises(ParseRetriesExhausted):
        build_afc(gateway, record, "afc-model", retries=0)


# --- leakage --------------------------------------------------------------


def test_leakage_score_low(record, afc_text):
    afc = make_afc(record, afc_text)
    table = {
        "chat": [
            {
                "requires": ["judging the quality of test and evaluation questions", afc_text],
                "response": "<output_format>Answer Giveaway: 2</output_format>",
            }
        ]
    }
    gateway, _ = scripted_gateway(table)
    assert check_answer_leakage(gateway, afc, record, "judge") == 2


def test_leakage_score_high(record, afc_text):
    afc = make_afc(record, afc_text)
    gateway, _ = scripted_gateway(
        {"chat": [{"requires": [], "response": "<output_format>Answer Giveaway: 9</output_format>"}]}
    )
    assert check_answer_leakage(gateway, afc, record, "judge") == 9


def test_leakage_requires_answer_free_variant(record):
    variant = answer_containing_variant(record)
    gateway, _ = scripted_gateway({"chat": []})
    with pytest.raises(ValueError):
        check_answer_leakage(gateway, variant, record, "judge")


def test_lexical_answer_guard_matches_substring_oracle(record, afc_text):
    # Independent oracle: lowercase, collapse runs of whitespace, substring test.
    def oracle(text: str, answer: str) -> bool:
        import re

        squash = lambda s: re.sub(r"\s+", " ", s.lower()).strip()
        return squash(answer) in squash(text)

    cases = [
        (afc_text, record.answer),
        ("The mineral found here is FLUORITE.", "fluorite"),
        ("the mineral is fluo rite", "fluorite"),
        ("Fluorite\ncrystals glow.", "fluorite  crystals"),
        ("nothing relevant", "fluorite"),
        ("answer embedded midword: xfluoritex", "fluorite"),
    ]
    for text, answer in cases:
        assert contains_answer(text, answer) == oracle(text, answer)


# --- rewrite_question -----------------------------------------------------


def rewrite_table(question: str, triple: tuple[str, str, str]) -> dict:
    q, e, a = triple
    return {
        "chat": [
            {
                "requires": ["rewrite the question according to the provided instructions", question],
                "response": (
                    "<document_analysis>…</document_analysis>\n"
                    f"<output_format>\nQuestion: {q}\nExplanation: {e}\nCorrect Answer: {a}\n</output_format>"
                ),
            }
        ]
    }


def test_rewrite_zinc_sulfide_example():
    record = QuestionRecord(
        id="zns1",
        question=ZNS_QUESTION,
        answer="ultraviolet",
        context=ZNS_CONTEXT,
        dataset_name="squadv2",
    )
    afc = make_afc(record, ZNS_CONTEXT)
    gateway, _ = scripted_gateway(
        rewrite_table(ZNS_QUESTION, (ZNS_REWRITE, "ZnS lasers emit in that band.", "ultraviolet"))
    )
    result = rewrite_question(gateway, record, afc, "rewriter")
    assert "portion of the electromagnetic spectrum" in result.rewritten_question


def test_rewrite_fields_mapped(record, afc_text):
    afc = make_afc(record, afc_text)
    triple = ("Which mineral occurs in the caves?", "Stated in the source.", "fluorite")
    gateway, _ = scripted_gateway(rewrite_table(record.question, triple))
    result = rewrite_question(gateway, record, afc, "rewriter")
    assert result.rewritten_question == triple[0]
    assert result.rewriter_explanation == triple[1]
    assert result.rewriter_answer == triple[2]
    assert result.rewriter_model == "rewriter"
    assert result.grounding == ANSWER_FREE
    assert result.prompt_hash == prompting.load_template("rewrite").hash
    assert "<output_format>" in result.raw


def test_rewrite_missing_label_fails_with_audit_trail(record, afc_text):
    afc = make_afc(record, afc_text)
    gateway, backend = scripted_gateway(
        {"chat": [{"requires": [], "response": "<output_format>Question: Q\nExplanation: E</output_format>"}]}
    )
    with pytest.raises(ParseRetriesExhausted) as info:
        rewrite_question(gateway, record, afc, "rewriter", retries=2)
    assert backend.chat_calls == 3
    assert all("Question: Q" in attempt for attempt in info.value.attempts)


def test_rewrite_request_grounding_isolation(record, afc_text):
    # The AFC-pathway rewrite request carries the AFC text and never the
    # original answer-containing context.
    afc = make_afc(record, afc_text)
    triple = ("Which mineral occurs in the caves?", "Stated.", "fluorite")
    gateway, backend = scripted_gateway(rewrite_table(record.question, triple))
    rewrite_question(gateway, record, afc, "rewriter")
    (kind, prompt), = backend.call_log
    assert afc_text in prompt
    assert record.context not in prompt


def test_rewrite_answer_containing_mode_flagged(record):
    variant = answer_containing_variant(record)
    assert variant.text == record.context  # byte-identical
    triple = ("Which mineral occurs in the caves?", "Stated.", "fluorite")
    gateway, _ = scripted_gateway(rewrite_table(record.question, triple))
    result = rewrite_question(gateway, record, variant, "rewriter")
    assert result.grounding == ANSWER_CONTAINING


def test_rewrite_rejects_foreign_variant(record, afc_text):
    afc = ContextVariant(record_id="other", kind=ANSWER_FREE, text=afc_text, generator_model="g")
    gateway, _ = scripted_gateway({"chat": []})
    with pytest.raises(ValueError):
        rewrite_question(gateway, record, afc, "rewriter")


# --- in-situ composition ---------------------------------------------------


def test_compose_in_situ_contains_each_input_once(record, afc_text):
    afc = make_afc(record, afc_text)
    request = compose_in_situ(record, afc, "eval-model")
    text = request.text()
    assert text.count(afc_text) == 1
    assert text.count(record.question) == 1


def test_compose_in_situ_empty_afc_precondition(record):
    afc = ContextVariant(record_id=record.id, kind=ANSWER_FREE, text="  ", generator_model="g")
    with pytest.raises(ValueError):
        compose_in_situ(record, afc, "eval-model")


def test_in_situ_template_distinct_from_rewrite(record, afc_text):
    assert prompting.load_template("in_situ").hash != prompting.load_template("rewrite").hash
    prompt = render_in_situ_prompt(record, make_afc(record, afc_text))
    assert "Final Answer" in prompt
