"""Judge scoring, embedding similarity, and the rewrite discard rules."""

from __future__ import annotations

from dataclasses import dataclass, field

from afcbench import prompting
from afcbench.analysis import cosine
from afcbench.corpus import QuestionRecord, RewriteResult
from afcbench.gateway import LlmGateway, RequestDefaults

TARGET_ORIGINAL = "original"
TARGET_REWRITTEN = "rewritten"

REASON_LOW_QUESTION_SIM = "low_question_sim"
REASON_LOW_ANSWER_SIM = "low_answer_sim"
REASON_GIVEAWAY_INCREASED = "giveaway_increased"
REASON_LOW_ANSWER_QUALITY = "low_rewrite_answer_quality"
REASON_REWRITE_FAILED = "rewrite_failed"
REASON_AFC_FAILED = "afc_failed"
REASON_UNPARSEABLE = "unparseable"
REASON_ANSWER_LEAK = "answer_leak"

FILTER_REASONS = (
    REASON_LOW_QUESTION_SIM,
    REASON_LOW_ANSWER_SIM,
    REASON_GIVEAWAY_INCREASED,
    REASON_LOW_ANSWER_QUALITY,
    REASON_REWRITE_FAILED,
    REASON_AFC_FAILED,
    REASON_UNPARSEABLE,
    REASON_ANSWER_LEAK,
)


@dataclass
class JudgeScores:
    """Four 1-10 judge ratings for one question variant."""

    clarity: int
    difficulty: int
    groundedness: int
    giveaway: int
    target: str = TARGET_ORIGINAL

    def to_json(self) -> dict:
        return {
            "clarity": self.clarity,
            "difficulty": self.difficulty,
            "groundedness": self.groundedness,
            "giveaway": self.giveaway,
            "target": self.target,
        }


@dataclass
class SimilarityScores:
    question_sim: float
    answer_sim: float
    method: str


@dataclass
class FilterThresholds:
    """Discard thresholds; similarity cutoffs default to 0.70.

    min_answer_correctness is an optional extra rule (off by default) that
    discards rewrites whose own answer scored below the cutoff in the
    explanation-validation check.
    """

    question_sim: float = 0.70
    answer_sim: float = 0.70
    leakage_flag: int = 7
    min_answer_correctness: int | None = None

    def validate(self) -> None:
        for name in ("question_sim", "answer_sim"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [-1, 1], got {value}")
        if not 1 <= self.leakage_flag <= 10:
            raise ValueError(f"leakage_flag must be in [1, 10], got {self.leakage_flag}")
        if self.min_answer_correctness is not None and not 1 <= self.min_answer_correctness <= 10:
            raise ValueError("min_answer_correctness must be in [1, 10] when set")

    def to_json(self) -> dict:
        return {
            "question_sim": self.question_sim,
            "answer_sim": self.answer_sim,
            "leakage_flag": self.leakage_flag,
            "min_answer_correctness": self.min_answer_correctness,
        }


@dataclass
class FilterDecision:
    """Keep/discard verdict for one rewrite; kept is true iff reasons is empty."""

    record_id: str
    kept: bool
    reasons: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        assert self.kept == (not self.reasons), "kept must match empty reasons"

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "kept": self.kept, "reasons": list(self.reasons)}


def score_properties(
    gateway: LlmGateway,
    question: str,
    answer: str,
    context: str,
    judge_model: str,
    target: str = TARGET_ORIGINAL,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> JudgeScores:
    """Extract the four question-property ratings from the LM judge."""
    for name, value in (("question", question), ("answer", answer), ("context", context)):
        if not value.strip():
            raise ValueError(f"{name} must be non-empty")
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("properties")
    prompt = prompting.render(template, {"question": question, "answer": answer, "context": context})

    def parse(raw: str) -> dict[str, int]:
        return prompting.parse_score_block(raw, prompting.PROPERTY_LABELS)

    scores, _ = gateway.complete_parsed(defaults.request(judge_model, prompt), parse, retries=retries)
    return JudgeScores(
        clarity=scores["Clarity"],
        difficulty=scores["Difficulty"],
        groundedness=scores["Groundedness"],
        giveaway=scores["Answer Giveaway"],
        target=target,
    )


def score_similarity(gateway: LlmGateway, original: str, rewritten: str, embed_model: str) -> float:
    """Cosine similarity between the embeddings of two texts."""
    if not original.strip() or not rewritten.strip():
        raise ValueError("similarity inputs must be non-empty")
    return cosine(gateway.embed(original, embed_model), gateway.embed(rewritten, embed_model))


def score_similarity_judge(
    gateway: LlmGateway,
    original: str,
    rewritten: str,
    judge_model: str,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> float:
    """Judge-rated similarity, for parity experiments against the embedding route.

    The 1-10 rating maps to score/10 so the same kept-threshold scale applies:
    with the default 0.70 cutoff a judge rating of 7 or above keeps the item.
    """
    if not original.strip() or not rewritten.strip():
        raise ValueError("similarity inputs must be non-empty")
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("similarity")
    prompt = prompting.render(template, {"original": original, "rewritten": rewritten})

    def parse(raw: str) -> int:
        return prompting.parse_score_block(raw, ("Similarity",))["Similarity"]

    score, _ = gateway.complete_parsed(defaults.request(judge_model, prompt), parse, retries=retries)
    return score / 10.0


def validate_rewriter_answer(
    gateway: LlmGateway,
    record: QuestionRecord,
    rewrite: RewriteResult,
    judge_model: str,
    defaults: RequestDefaults | None = None,
    retries: int = 2,
) -> dict[str, int]:
    """Judge the rewriter's own answer and explanation against the context.

    This is a validation check on the rewrite; the rewriter's answer is never
    used as grading truth.
    """
    defaults = defaults or RequestDefaults()
    template = prompting.load_template("explanation_validation")
    prompt = prompting.render(
        template,
        {
            "question": rewrite.rewritten_question,
            "answer": rewrite.rewriter_answer,
            "explanation": rewrite.rewriter_explanation,
            "context": record.context,
        },
    )

    def parse(raw: str) -> dict[str, int]:
        return prompting.parse_score_block(raw, prompting.EXPLANATION_LABELS)

    scores, _ = gateway.complete_parsed(defaults.request(judge_model, prompt), parse, retries=retries)
    return {
        "answer_correctness": scores["Answer Correctness"],
        "explanation_validity": scores["Explanation Validity"],
    }


def apply_filter(
    orig_scores: JudgeScores,
    rew_scores: JudgeScores,
    sims: SimilarityScores,
    thresholds: FilterThresholds,
    record_id: str = "",
    answer_scores: dict[str, int] | None = None,
) -> FilterDecision:
    """Apply the discard rules; kept iff every rule passes.

    A rewrite is kept when both similarities meet their thresholds and its
    giveaway score did not increase over the original (equal giveaway is
    kept). Reasons enumerate every violated rule.
    """
    reasons: list[str] = []
    if sims.question_sim < thresholds.question_sim:
        reasons.append(REASON_LOW_QUESTION_SIM)
    if sims.answer_sim < thresholds.answer_sim:
        reasons.append(REASON_LOW_ANSWER_SIM)
    if rew_scores.giveaway > orig_scores.giveaway:
        reasons.append(REASON_GIVEAWAY_INCREASED)
    if (
        thresholds.min_answer_correctness is not None
        and answer_scores is not None
        and answer_scores["answer_correctness"] < thresholds.min_answer_correctness
    ):
        reasons.append(REASON_LOW_ANSWER_QUALITY)
    return FilterDecision(record_id=record_id, kept=not reasons, reasons=reasons)


def failed_decision(record_id: str, reasons: list[str]) -> FilterDecision:
    """Decision for an item that never reached scoring (upstream failure)."""
    unknown = [r for r in reasons if r not in FILTER_REASONS]
    if not reasons or unknown:
        raise ValueError(f"invalid failure reasons: {reasons}")
    return FilterDecision(record_id=record_id, kept=False, reasons=list(reasons))
