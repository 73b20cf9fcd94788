"""Stage runners: each one reads prior artifacts from the run directory and
writes its own, never mutating another stage's output. Re-running a stage with
a warm response cache reproduces its artifacts byte for byte."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from afcbench import analysis, evaluator, prompting, transform, validator
from afcbench.config import RunConfig, build_gateway
from afcbench.corpus import (
    ANSWER_FREE,
    ContextVariant,
    QuestionRecord,
    RewriteResult,
    RunManifest,
    load_dataset,
    load_rewrites,
    load_variants,
    persist_variants,
    read_rows,
    write_rows,
)
from afcbench.gateway import GatewayError, LlmGateway, ParseRetriesExhausted

logger = logging.getLogger(__name__)

STAGE_ORDER = ("afc", "rewrite", "validate", "evaluate", "analyze", "report")


class PipelineError(RuntimeError):
    """A stage cannot run: missing prerequisite artifacts or broken inputs."""


@dataclass
class StageSummary:
    stage: str
    processed: int = 0
    failed: int = 0
    flags: dict[str, int] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def flag(self, name: str, count: int = 1) -> None:
        self.flags[name] = self.flags.get(name, 0) + count

    def error(self, message: str) -> None:
        self.errors.append(message)
        self.failed += 1

    def describe(self) -> str:
        flags = " ".join(f"{k}={v}" for k, v in sorted(self.flags.items())) or "-"
        return f"[{self.stage}] processed={self.processed} failed={self.failed} flags: {flags}"


def sanitize_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def dataset_dir(config: RunConfig, dataset_name: str) -> Path:
    return config.run_path / sanitize_name(dataset_name)


def _require(path: Path, stage: str, produced_by: str) -> Path:
    if not path.is_file():
        raise PipelineError(
            f"{stage}: missing {path.name} ({path}); run the {produced_by!r} stage first"
        )
    return path


def ensure_manifest(config: RunConfig) -> RunManifest:
    """Create the run manifest, leaving it untouched when the config matches."""
    path = config.run_path / "manifest.json"
    digest = config.config_hash()
    if path.is_file():
        existing = RunManifest.load(path)
        if existing.config_hash == digest:
            return existing
        logger.info("config changed; rewriting manifest in %s", config.run_path)
    models = [
        config.models.afc,
        config.models.rewrite,
        config.models.judge,
        config.models.grader,
        config.models.embed,
        *config.models.eval,
    ]
    thresholds = {
        name: value
        for name, value in config.thresholds.to_json().items()
        if value is not None
    }
    manifest = RunManifest(
        run_id=config.run_path.name,
        config_hash=digest,
        model_names=sorted(set(models)),
        prompt_hashes=prompting.all_template_hashes(),
        thresholds=thresholds,
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    manifest.save(path)
    return manifest


def load_grouped_records(config: RunConfig, summary: StageSummary) -> dict[str, list[QuestionRecord]]:
    """Load every configured dataset file and group records by dataset_name.

    The per-run limit applies per dataset group. Load issues are warnings
    unless the config is strict, in which case the first issue aborts.
    """
    groups: dict[str, list[QuestionRecord]] = {}
    seen: dict[tuple[str, str], str] = {}
    for path in config.datasets:
        records, issues = load_dataset(path, strict=config.strict)
        for issue in issues:
            logger.warning("%s: %s", path, issue)
            summary.flag("load_issues")
        for record in records:
            key = (record.dataset_name, record.id)
            if key in seen:
                raise PipelineError(
                    f"record id {record.id!r} in dataset {record.dataset_name!r} appears in both "
                    f"{seen[key]} and {path}"
                )
            seen[key] = str(path)
            groups.setdefault(record.dataset_name, []).append(record)
    if config.limit is not None:
        groups = {name: records[: config.limit] for name, records in groups.items()}
    return groups


def _parallel(fn: Callable[[Any], Any], items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def stage_afc(config: RunConfig, gateway: LlmGateway) -> StageSummary:
    """Build the answer-free context for every record and audit leakage."""
    summary = StageSummary("afc")
    ensure_manifest(config)
    groups = load_grouped_records(config, summary)

    def work(record: QuestionRecord) -> tuple[str, ContextVariant | None, dict, str | None]:
        audit: dict = {"record_id": record.id, "flags": [], "leakage_score": None}
        try:
            afc = transform.build_afc(
                gateway, record, config.models.afc, defaults=config.request, retries=config.retries
            )
        except ParseRetriesExhausted as err:
            audit["flags"].append("afc_failed")
            audit["attempts"] = err.attempts
            return record.id, None, audit, None
        except GatewayError as err:
            return record.id, None, audit, f"{record.id}: {err}"
        if transform.contains_answer(afc.text, record.answer):
            audit["flags"].append("answer_substring")
        try:
            score = transform.check_answer_leakage(
                gateway, afc, record, config.models.judge, defaults=config.request, retries=config.retries
            )
            audit["leakage_score"] = score
            if score >= config.thresholds.leakage_flag:
                audit["flags"].append("leakage_flagged")
        except ParseRetriesExhausted as err:
            audit["flags"].append("leakage_unknown")
            audit["attempts"] = err.attempts
        except GatewayError as err:
            return record.id, None, audit, f"{record.id}: {err}"
        return record.id, afc, audit, None

    for dataset_name, records in groups.items():
        out_dir = dataset_dir(config, dataset_name)
        results = _parallel(work, records, config.concurrency)
        variants = []
        audits = []
        for record_id, afc, audit, error in sorted(results, key=lambda r: r[0]):
            summary.processed += 1
            audits.append(audit)
            for name in audit["flags"]:
                summary.flag(name)
            if error:
                summary.error(error)
            elif afc is not None:
                variants.append(afc)
        persist_variants(variants, out_dir / "afc.jsonl")
        write_rows(audits, out_dir / "afc_audit.jsonl")
        summary.artifacts += [str(out_dir / "afc.jsonl"), str(out_dir / "afc_audit.jsonl")]
    return summary


def _load_afcs(config: RunConfig, dataset_name: str) -> dict[str, ContextVariant]:
    path = dataset_dir(config, dataset_name) / "afc.jsonl"
    if not path.is_file():
        return {}
    return {variant.record_id: variant for variant in load_variants(path)}


def _audit_flags(config: RunConfig, dataset_name: str, filename: str) -> dict[str, list[str]]:
    path = dataset_dir(config, dataset_name) / filename
    if not path.is_file():
        return {}
    return {row["record_id"]: row.get("flags", []) for row in read_rows(path)}


def stage_rewrite(config: RunConfig, gateway: LlmGateway) -> StageSummary:
    """Rewrite every question, grounded in its answer-free context."""
    summary = StageSummary("rewrite")
    ensure_manifest(config)
    groups = load_grouped_records(config, summary)

    for dataset_name, records in groups.items():
        out_dir = dataset_dir(config, dataset_name)
        if config.rewrite_grounding == ANSWER_FREE:
            _require(out_dir / "afc.jsonl", "rewrite", "afc")
            afcs = _load_afcs(config, dataset_name)
            pairs = [(record, afcs[record.id]) for record in records if record.id in afcs]
            skipped = [record for record in records if record.id not in afcs]
        else:
            pairs = [(record, transform.answer_containing_variant(record)) for record in records]
            skipped = []

        def work(pair: tuple[QuestionRecord, ContextVariant]):
            record, variant = pair
            audit: dict = {"record_id": record.id, "flags": []}
            try:
                rewrite = transform.rewrite_question(
                    gateway, record, variant, config.models.rewrite,
                    defaults=config.request, retries=config.retries,
                )
            except ParseRetriesExhausted as err:
                audit["flags"].append("rewrite_failed")
                audit["attempts"] = err.attempts
                return record.id, None, audit, None
            except GatewayError as err:
                return record.id, None, audit, f"{record.id}: {err}"
            if transform.contains_answer(rewrite.rewritten_question, record.answer):
                audit["flags"].append("answer_leak")
            return record.id, rewrite, audit, None

        results = _parallel(work, pairs, config.concurrency)
        rewrites: list[RewriteResult] = []
        audits = []
        for record_id, rewrite, audit, error in sorted(results, key=lambda r: r[0]):
            summary.processed += 1
            audits.append(audit)
            for name in audit["flags"]:
                summary.flag(name)
            if error:
                summary.error(error)
            elif rewrite is not None:
                rewrites.append(rewrite)
        for record in skipped:
            summary.flag("skipped_afc_failed")
        persist_variants(rewrites, out_dir / "rewrites.jsonl")
        write_rows(audits, out_dir / "rewrite_audit.jsonl")
        summary.artifacts += [str(out_dir / "rewrites.jsonl"), str(out_dir / "rewrite_audit.jsonl")]
    return summary


def stage_validate(config: RunConfig, gateway: LlmGateway) -> StageSummary:
    """Score original and rewritten questions, then apply the discard rules."""
    summary = StageSummary("validate")
    ensure_manifest(config)
    groups = load_grouped_records(config, summary)

    if config.similarity_method == "judge":
        method = f"judge:{config.models.judge}"

        def similarity(original: str, rewritten: str) -> float:
            return validator.score_similarity_judge(
                gateway, original, rewritten, config.models.judge,
                defaults=config.request, retries=config.retries,
            )
    else:
        method = f"embedding_cosine:{config.models.embed}"

        def similarity(original: str, rewritten: str) -> float:
            return validator.score_similarity(gateway, original, rewritten, config.models.embed)

    for dataset_name, records in groups.items():
        out_dir = dataset_dir(config, dataset_name)
        _require(out_dir / "rewrites.jsonl", "validate", "rewrite")
        rewrites = {r.record_id: r for r in load_rewrites(out_dir / "rewrites.jsonl")}
        afc_flags = _audit_flags(config, dataset_name, "afc_audit.jsonl")
        rewrite_flags = _audit_flags(config, dataset_name, "rewrite_audit.jsonl")

        def work(record: QuestionRecord):
            row: dict = {
                "record_id": record.id,
                "original": None,
                "rewritten": None,
                "question_sim": None,
                "answer_sim": None,
                "similarity_method": method,
                "answer_correctness": None,
                "explanation_validity": None,
                "flags": [],
            }
            if "afc_failed" in afc_flags.get(record.id, []):
                return record.id, row, validator.failed_decision(record.id, [validator.REASON_AFC_FAILED]), None
            rewrite = rewrites.get(record.id)
            if rewrite is None or "rewrite_failed" in rewrite_flags.get(record.id, []):
                return record.id, row, validator.failed_decision(record.id, [validator.REASON_REWRITE_FAILED]), None
            if "answer_leak" in rewrite_flags.get(record.id, []):
                return record.id, row, validator.failed_decision(record.id, [validator.REASON_ANSWER_LEAK]), None
            try:
                orig_scores = validator.score_properties(
                    gateway, record.question, record.answer, record.context,
                    config.models.judge, target=validator.TARGET_ORIGINAL,
                    defaults=config.request, retries=config.retries,
                )
                rew_scores = validator.score_properties(
                    gateway, rewrite.rewritten_question, record.answer, record.context,
                    config.models.judge, target=validator.TARGET_REWRITTEN,
                    defaults=config.request, retries=config.retries,
                )
                question_sim = similarity(record.question, rewrite.rewritten_question)
                answer_sim = similarity(record.answer, rewrite.rewriter_answer)
                answer_scores = validator.validate_rewriter_answer(
                    gateway, record, rewrite, config.models.judge,
                    defaults=config.request, retries=config.retries,
                )
            except ParseRetriesExhausted:
                row["flags"].append("unparseable")
                return record.id, row, validator.failed_decision(record.id, [validator.REASON_UNPARSEABLE]), None
            except GatewayError as err:
                return record.id, row, None, f"{record.id}: {err}"
            sims = validator.SimilarityScores(question_sim, answer_sim, method)
            row.update(
                original=orig_scores.to_json(),
                rewritten=rew_scores.to_json(),
                question_sim=question_sim,
                answer_sim=answer_sim,
                answer_correctness=answer_scores["answer_correctness"],
                explanation_validity=answer_scores["explanation_validity"],
            )
            decision = validator.apply_filter(
                orig_scores, rew_scores, sims, config.thresholds,
                record_id=record.id, answer_scores=answer_scores,
            )
            return record.id, row, decision, None

        results = _parallel(work, records, config.concurrency)
        score_rows = []
        decisions: list[validator.FilterDecision] = []
        kept: list[RewriteResult] = []
        for record_id, row, decision, error in sorted(results, key=lambda r: r[0]):
            summary.processed += 1
            score_rows.append(row)
            if error:
                summary.error(error)
                continue
            decisions.append(decision)
            if decision.kept:
                kept.append(rewrites[record_id])
            else:
                for reason in decision.reasons:
                    summary.flag(f"discard_{reason}")
        write_rows(score_rows, out_dir / "scores.jsonl")
        write_rows([d.to_json() for d in decisions], out_dir / "filter_decisions.jsonl")
        persist_variants(kept, out_dir / "benchmark.jsonl")
        summary.flag("kept", len(kept))
        summary.artifacts += [
            str(out_dir / "scores.jsonl"),
            str(out_dir / "filter_decisions.jsonl"),
            str(out_dir / "benchmark.jsonl"),
        ]
    return summary


def _needs_afc(conditions: list[str]) -> bool:
    return any(c in (evaluator.ORIG_Q_AFC, evaluator.REWRITE_Q_AFC, evaluator.IN_SITU) for c in conditions)


def stage_evaluate(config: RunConfig, gateway: LlmGateway) -> StageSummary:
    """Run the condition matrix over every kept record and accumulate accuracy."""
    summary = StageSummary("evaluate")
    ensure_manifest(config)
    groups = load_grouped_records(config, summary)
    conditions = list(config.conditions)

    outcome_paths: list[Path] = []
    for dataset_name, records in groups.items():
        out_dir = dataset_dir(config, dataset_name)
        _require(out_dir / "rewrites.jsonl", "evaluate", "rewrite")
        _require(out_dir / "benchmark.jsonl", "evaluate", "validate")
        kept = {r.record_id: r for r in load_rewrites(out_dir / "benchmark.jsonl")}
        afcs = _load_afcs(config, dataset_name)
        if _needs_afc(conditions) and not afcs:
            _require(out_dir / "afc.jsonl", "evaluate", "afc")
        eval_records = [record for record in records if record.id in kept]
        for record in eval_records:
            if _needs_afc(conditions) and record.id not in afcs:
                raise PipelineError(
                    f"evaluate: record {record.id!r} has no answer-free context in "
                    f"{out_dir / 'afc.jsonl'}"
                )

        for eval_model in config.models.eval:
            out_path = out_dir / "outcomes" / f"{sanitize_name(eval_model)}.jsonl"
            outcome_paths.append(out_path)
            expected = len(eval_records) * len(conditions)
            if out_path.is_file():
                existing = evaluator.load_outcomes(out_path)
                if len(existing) == expected:
                    logger.info("skipping complete cell %s", out_path)
                    summary.flag("cells_skipped")
                    continue

            def work(task: tuple[QuestionRecord, str]):
                record, condition = task
                try:
                    outcome = evaluator.evaluate_record(
                        gateway, record, condition, eval_model, config.models.grader,
                        rewrite=kept.get(record.id), afc=afcs.get(record.id),
                        defaults=config.request, retries=config.retries,
                    )
                except GatewayError as err:
                    return record.id, condition, None, f"{record.id}/{condition}: {err}"
                return record.id, condition, outcome, None

            tasks = [(record, condition) for record in eval_records for condition in conditions]
            results = _parallel(work, tasks, config.concurrency)
            outcomes: list[evaluator.EvalOutcome] = []
            order = {condition: i for i, condition in enumerate(evaluator.CONDITIONS)}
            for record_id, condition, outcome, error in sorted(
                results, key=lambda r: (r[0], order[r[1]])
            ):
                summary.processed += 1
                if error:
                    summary.error(error)
                    continue
                for name in outcome.flags:
                    summary.flag(name)
                outcomes.append(outcome)
            persist_variants(outcomes, out_path)
            summary.artifacts.append(str(out_path))

    all_outcomes: list[evaluator.EvalOutcome] = []
    for path in outcome_paths:
        if path.is_file():
            all_outcomes.extend(evaluator.load_outcomes(path))
    cells = evaluator.accuracy(all_outcomes)
    accuracy_path = config.run_path / "accuracy.csv"
    evaluator.write_accuracy_csv(cells, accuracy_path)
    summary.artifacts.append(str(accuracy_path))
    return summary


def stage_analyze(config: RunConfig, gateway: LlmGateway) -> StageSummary:
    """Compute accuracy deltas and the question-context alignment points."""
    summary = StageSummary("analyze")
    ensure_manifest(config)
    groups = load_grouped_records(config, summary)
    accuracy_path = _require(config.run_path / "accuracy.csv", "analyze", "evaluate")
    accuracies = evaluator.accuracy_values(evaluator.read_accuracy_csv(accuracy_path))

    all_records: list[QuestionRecord] = []
    rewrites: dict[str, RewriteResult] = {}
    afcs: dict[str, ContextVariant] = {}
    for dataset_name, records in groups.items():
        out_dir = dataset_dir(config, dataset_name)
        _require(out_dir / "benchmark.jsonl", "analyze", "validate")
        _require(out_dir / "afc.jsonl", "analyze", "afc")
        all_records.extend(records)
        rewrites.update({r.record_id: r for r in load_rewrites(out_dir / "benchmark.jsonl")})
        afcs.update(_load_afcs(config, dataset_name))

    # Warm the embedding cache in parallel; alignment_points then reads hits.
    texts = []
    for record in all_records:
        rewrite = rewrites.get(record.id)
        afc = afcs.get(record.id)
        if rewrite is None or afc is None:
            continue
        texts += [afc.text, record.question, rewrite.rewritten_question]
    unique_texts = sorted(set(texts))
    _parallel(
        lambda text: gateway.embed(analysis.EMBED_INSTRUCTION + text, config.models.embed),
        unique_texts,
        config.concurrency,
    )

    deltas = analysis.delta_table(accuracies)
    points = analysis.alignment_points(
        all_records, rewrites, afcs, accuracies, gateway, config.models.embed,
        aggregate=config.alignment_aggregate,
    )
    summary.processed = len(deltas) + len(points)
    out_dir = config.run_path / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_deltas_csv(deltas, out_dir / "deltas.csv")
    analysis.write_alignment_csv(points, out_dir / "alignment.csv")
    summary.artifacts += [str(out_dir / "deltas.csv"), str(out_dir / "alignment.csv")]
    return summary


def stage_report(config: RunConfig, gateway: LlmGateway | None = None) -> StageSummary:
    """Render the report kit (CSVs plus summary.md) from the analysis artifacts."""
    summary = StageSummary("report")
    ensure_manifest(config)
    analysis_dir = config.run_path / "analysis"
    deltas = analysis.read_deltas_csv(_require(analysis_dir / "deltas.csv", "report", "analyze"))
    points = analysis.read_alignment_csv(_require(analysis_dir / "alignment.csv", "report", "analyze"))
    accuracy_path = _require(config.run_path / "accuracy.csv", "report", "evaluate")
    accuracies = evaluator.accuracy_values(evaluator.read_accuracy_csv(accuracy_path))
    paths = analysis.emit_report(deltas, points, config.run_path / "report", accuracies=accuracies)
    summary.processed = len(deltas) + len(points)
    summary.artifacts += [str(p) for p in paths]
    return summary


STAGES: dict[str, Callable[[RunConfig, LlmGateway], StageSummary]] = {
    "afc": stage_afc,
    "rewrite": stage_rewrite,
    "validate": stage_validate,
    "evaluate": stage_evaluate,
    "analyze": stage_analyze,
    "report": stage_report,
}


def run_stage(stage: str, config: RunConfig, gateway: LlmGateway | None = None) -> StageSummary:
    """Run one named stage; prerequisites are checked before any model call."""
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGE_ORDER}")
    return STAGES[stage](config, gateway or build_gateway(config))


def run_all(config: RunConfig, gateway: LlmGateway | None = None) -> list[StageSummary]:
    """Run every stage in order against one shared gateway."""
    gateway = gateway or build_gateway(config)
    return [STAGES[stage](config, gateway) for stage in STAGE_ORDER]
