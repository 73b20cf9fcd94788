"""Accuracy deltas, question-context embedding alignment, and report output."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from afcbench.corpus import ContextVariant, QuestionRecord, RewriteResult
from afcbench.gateway import EmbeddingVector, LlmGateway

# Condition pairs behind each reported accuracy delta: value = acc(A) - acc(B).
DELTA_PAIRS = {
    "rewrite_minus_orig": ("rewrite_q", "orig_q"),
    "rewrite_minus_orig_afc": ("rewrite_q", "orig_q_afc"),
    "rewriteafc_minus_orig_afc": ("rewrite_q_afc", "orig_q_afc"),
    "insitu_minus_orig_afc": ("in_situ", "orig_q_afc"),
}

# Instruction prefix prepended to both question and context texts before
# embedding for the alignment analysis; instruction-tuned embedding models
# expect a task statement.
EMBED_INSTRUCTION = "Instruct: Given a question, retrieve the background passage that grounds it.\nQuery: "

QUADRANTS = ("upper_right", "upper_left", "lower_left", "lower_right", "axis")


@dataclass
class DeltaRecord:
    """Accuracy difference between two conditions for one (model, dataset)."""

    eval_model: str
    dataset: str
    kind: str
    value: float


@dataclass
class AlignmentPoint:
    """Accuracy delta paired with the question-context cosine delta."""

    eval_model: str
    dataset: str
    d_accuracy: float
    d_cosine: float


def cosine(u, v) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1] against rounding."""
    if isinstance(u, EmbeddingVector):
        u = u.values
    if isinstance(v, EmbeddingVector):
        v = v.values
    if len(u) != len(v):
        raise ValueError(f"dimension mismatch: {len(u)} vs {len(v)}")
    if not u:
        raise ValueError("empty vectors")
    dot = math.fsum(a * b for a, b in zip(u, v))
    norm_u = math.sqrt(math.fsum(a * a for a in u))
    norm_v = math.sqrt(math.fsum(b * b for b in v))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return max(-1.0, min(1.0, dot / (norm_u * norm_v)))


def delta_table(accuracies: Mapping[tuple[str, str, str], float]) -> list[DeltaRecord]:
    """One DeltaRecord per (model, dataset, kind) with both conditions present."""
    groups = sorted({(model, dataset) for model, dataset, _ in accuracies})
    out: list[DeltaRecord] = []
    for model, dataset in groups:
        for kind, (target, base) in DELTA_PAIRS.items():
            target_key = (model, dataset, target)
            base_key = (model, dataset, base)
            if target_key in accuracies and base_key in accuracies:
                out.append(DeltaRecord(model, dataset, kind, accuracies[target_key] - accuracies[base_key]))
    out.sort(key=lambda d: (d.eval_model, d.dataset, d.kind))
    return out


def alignment_points(
    records: Iterable[QuestionRecord],
    rewrites: Mapping[str, RewriteResult],
    afcs: Mapping[str, ContextVariant],
    accuracies: Mapping[tuple[str, str, str], float],
    gateway: LlmGateway,
    embed_model: str,
    aggregate: str = "mean",
) -> list[AlignmentPoint]:
    """Pair each (model, dataset) rewrite-accuracy delta with its cosine delta.

    The cosine delta is aggregated per dataset over the records that have both
    a kept rewrite and an answer-free context:
    cos(rewritten, afc) - cos(original, afc), embeddings taken with the
    EMBED_INSTRUCTION prefix on both sides.
    """
    if aggregate not in ("mean", "median"):
        raise ValueError(f"aggregate must be mean or median, got {aggregate!r}")
    combine = statistics.fmean if aggregate == "mean" else statistics.median

    per_dataset: dict[str, list[float]] = {}
    for record in records:
        rewrite = rewrites.get(record.id)
        afc = afcs.get(record.id)
        if rewrite is None or afc is None:
            continue
        ctx_vec = gateway.embed(EMBED_INSTRUCTION + afc.text, embed_model)
        orig_vec = gateway.embed(EMBED_INSTRUCTION + record.question, embed_model)
        rew_vec = gateway.embed(EMBED_INSTRUCTION + rewrite.rewritten_question, embed_model)
        delta = cosine(rew_vec, ctx_vec) - cosine(orig_vec, ctx_vec)
        per_dataset.setdefault(record.dataset_name, []).append(delta)

    d_cosine = {dataset: combine(values) for dataset, values in per_dataset.items()}
    d_accuracy = {
        (d.eval_model, d.dataset): d.value
        for d in delta_table(accuracies)
        if d.kind == "rewrite_minus_orig"
    }
    points = [
        AlignmentPoint(model, dataset, acc_delta, d_cosine[dataset])
        for (model, dataset), acc_delta in d_accuracy.items()
        if dataset in d_cosine
    ]
    points.sort(key=lambda p: (p.eval_model, p.dataset))
    return points


def quadrant_counts(points: Iterable[AlignmentPoint]) -> dict[str, int]:
    """Strict-sign quadrant tally; a zero coordinate goes to the axis bucket."""
    counts = {name: 0 for name in QUADRANTS}
    for point in points:
        x, y = point.d_accuracy, point.d_cosine
        if x == 0 or y == 0:
            counts["axis"] += 1
        elif x > 0 and y > 0:
            counts["upper_right"] += 1
        elif x < 0 and y > 0:
            counts["upper_left"] += 1
        elif x < 0 and y < 0:
            counts["lower_left"] += 1
        else:
            counts["lower_right"] += 1
    return counts


def write_deltas_csv(deltas: list[DeltaRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["eval_model", "dataset", "kind", "value"])
        for d in deltas:
            writer.writerow([d.eval_model, d.dataset, d.kind, repr(d.value)])


def read_deltas_csv(path: Path) -> list[DeltaRecord]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [
            DeltaRecord(row["eval_model"], row["dataset"], row["kind"], float(row["value"]))
            for row in csv.DictReader(handle)
        ]


def write_alignment_csv(points: list[AlignmentPoint], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["eval_model", "dataset", "d_accuracy", "d_cosine"])
        for p in points:
            writer.writerow([p.eval_model, p.dataset, repr(p.d_accuracy), repr(p.d_cosine)])


def read_alignment_csv(path: Path) -> list[AlignmentPoint]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [
            AlignmentPoint(
                row["eval_model"], row["dataset"], float(row["d_accuracy"]), float(row["d_cosine"])
            )
            for row in csv.DictReader(handle)
        ]


def _write_scatter_csv(
    deltas: list[DeltaRecord],
    accuracies: Mapping[tuple[str, str, str], float] | None,
    path: Path,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["eval_model", "dataset", "kind", "base_condition", "target_condition", "base_accuracy", "target_accuracy"]
        )
        if not accuracies:
            return
        for d in deltas:
            target, base = DELTA_PAIRS[d.kind]
            base_acc = accuracies.get((d.eval_model, d.dataset, base))
            target_acc = accuracies.get((d.eval_model, d.dataset, target))
            if base_acc is None or target_acc is None:
                continue
            writer.writerow([d.eval_model, d.dataset, d.kind, base, target, repr(base_acc), repr(target_acc)])


def _group_means(deltas: list[DeltaRecord], by: str) -> dict[tuple[str, str], float]:
    grouped: dict[tuple[str, str], list[float]] = {}
    for d in deltas:
        key = (getattr(d, by), d.kind)
        grouped.setdefault(key, []).append(d.value)
    return {key: statistics.fmean(values) for key, values in sorted(grouped.items())}


def _summary_markdown(deltas: list[DeltaRecord], points: list[AlignmentPoint]) -> str:
    lines = ["# Run summary", ""]
    if not deltas:
        lines += ["No delta data available for this run.", ""]
    else:
        kinds = sorted({d.kind for d in deltas})
        lines += ["## Mean accuracy deltas", ""]
        lines += ["| kind | mean | n |", "|---|---|---|"]
        for kind in kinds:
            values = [d.value for d in deltas if d.kind == kind]
            lines.append(f"| {kind} | {statistics.fmean(values):+.4f} | {len(values)} |")
        lines.append("")
        for by, title in (("eval_model", "Per-model mean deltas"), ("dataset", "Per-dataset mean deltas")):
            lines += [f"## {title}", ""]
            lines += [f"| {by} | kind | mean |", "|---|---|---|"]
            for (name, kind), value in _group_means(deltas, by).items():
                lines.append(f"| {name} | {kind} | {value:+.4f} |")
            lines.append("")
    lines += ["## Alignment quadrants", ""]
    if not points:
        lines += ["No alignment data available for this run.", ""]
    else:
        counts = quadrant_counts(points)
        total = len(points)
        lines += ["| quadrant | count | share |", "|---|---|---|"]
        for name in QUADRANTS:
            share = counts[name] / total if total else 0.0
            lines.append(f"| {name} | {counts[name]} | {share:.1%} |")
        lines.append("")
    return "\n".join(lines)


def emit_report(
    deltas: list[DeltaRecord],
    points: list[AlignmentPoint],
    out_dir: Path | str,
    accuracies: Mapping[tuple[str, str, str], float] | None = None,
) -> list[Path]:
    """Write deltas.csv, alignment.csv, scatter_accuracy.csv, and summary.md."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    deltas_path = out_dir / "deltas.csv"
    alignment_path = out_dir / "alignment.csv"
    scatter_path = out_dir / "scatter_accuracy.csv"
    summary_path = out_dir / "summary.md"
    write_deltas_csv(deltas, deltas_path)
    write_alignment_csv(points, alignment_path)
    _write_scatter_csv(deltas, accuracies, scatter_path)
    summary_path.write_text(_summary_markdown(deltas, points), encoding="utf-8")
    return [deltas_path, alignment_path, scatter_path, summary_path]
