"""Ranking and classification metrics, plus report rendering.

Retrieval is scored per claim with precision, recall and average precision at
a cutoff K, then macro-averaged over claims.  AP uses the cutoff-aware
denominator min(|gold|, K), so numbers are comparable only within this
artifact; report headers carry the definition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Set

from .corpus import (
    AnnotationLevel,
    Modality,
    RelevanceAnnotation,
    VerdictLabel,
    annotation_is_relevant,
)
from .errors import EvaluationError

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class RetrievalMetrics:
    k: int
    precision: float
    recall: float
    mean_ap: float
    n_claims: int


@dataclass(frozen=True, slots=True)
class ClaimScores:
    claim_id: str
    k: int
    precision: float
    recall: float
    average_precision: float
    empty_ranking: bool = False


def precision_recall_at_k(ranking: Sequence[str], gold: Set[str], k: int) -> tuple[float, float]:
    """(P@K, R@K) for one ranking against a non-empty gold set."""
    if k < 1:
        raise EvaluationError(f"K must be >= 1, got {k}")
    if not gold:
        raise EvaluationError("gold set is empty; exclude such claims upstream")
    if not ranking:
        return 0.0, 0.0
    hits = sum(1 for cid in ranking[:k] if cid in gold)
    return hits / k, hits / len(gold)


def average_precision_at_k(ranking: Sequence[str], gold: Set[str], k: int) -> float:
    """AP@K: mean precision at the gold hits in the top K, over min(|gold|, K)."""
    if k < 1:
        raise EvaluationError(f"K must be >= 1, got {k}")
    if not gold:
        raise EvaluationError("gold set is empty; exclude such claims upstream")
    if not ranking:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for position, cid in enumerate(ranking[:k], start=1):
        if cid in gold:
            hits += 1
            precision_sum += hits / position
    return precision_sum / min(len(gold), k)


def score_claims(
    rankings: Mapping[str, Sequence[str]],
    golds: Mapping[str, Set[str]],
    k: int,
    include_empty_gold: bool = False,
) -> list[ClaimScores]:
    """Per-claim scores for every claim with gold evidence, in claim-id order.

    Claims whose gold set is empty are skipped unless ``include_empty_gold``
    makes them count as zero; claims with an empty ranking score zero and are
    flagged.
    """
    scores: list[ClaimScores] = []
    for claim_id in sorted(rankings):
        gold = golds.get(claim_id, frozenset())
        if not gold:
            if include_empty_gold:
                scores.append(ClaimScores(claim_id, k, 0.0, 0.0, 0.0, empty_ranking=not rankings[claim_id]))
            continue
        ranking = rankings[claim_id]
        if not ranking:
            log.warning("claim %s has an empty ranking", claim_id)
            scores.append(ClaimScores(claim_id, k, 0.0, 0.0, 0.0, empty_ranking=True))
            continue
        precision, recall = precision_recall_at_k(ranking, gold, k)
        scores.append(
            ClaimScores(claim_id, k, precision, recall, average_precision_at_k(ranking, gold, k))
        )
    return scores


def map_at_k(
    rankings: Mapping[str, Sequence[str]],
    golds: Mapping[str, Set[str]],
    k: int,
    include_empty_gold: bool = False,
) -> RetrievalMetrics:
    """Unweighted mean of the per-claim scores."""
    scores = score_claims(rankings, golds, k, include_empty_gold)
    if not scores:
        raise EvaluationError("no claims with gold evidence to evaluate")
    n = len(scores)
    return RetrievalMetrics(
        k=k,
        precision=sum(s.precision for s in scores) / n,
        recall=sum(s.recall for s in scores) / n,
        mean_ap=sum(s.average_precision for s in scores) / n,
        n_claims=n,
    )


@dataclass(frozen=True, slots=True)
class AnnotatedEvaluation:
    metrics: RetrievalMetrics
    level: AnnotationLevel
    unannotated: dict[str, tuple[str, ...]]  # claim_id -> ids seen without an annotation
    skipped_claims: tuple[str, ...]          # ranked claims absent from the annotation file


def evaluate_with_annotations(
    rankings: Mapping[str, Sequence[str]],
    annotations: Iterable[RelevanceAnnotation],
    level: AnnotationLevel,
    k: int,
    modality: Modality | None = None,
) -> AnnotatedEvaluation:
    """Score rankings against human relevance annotations at one tier.

    The gold set per claim is the annotated-true candidates at the chosen
    level.  Ranked candidates without any annotation count as not relevant and
    are listed in the coverage report; claims missing from the annotation file
    are skipped with a warning.
    """
    annotated: dict[str, set[str]] = {}
    gold: dict[str, set[str]] = {}
    for ann in annotations:
        if modality is not None and ann.modality is not modality:
            continue
        annotated.setdefault(ann.claim_id, set()).add(ann.candidate_id)
        if annotation_is_relevant(ann, level):
            gold.setdefault(ann.claim_id, set()).add(ann.candidate_id)
    kept: dict[str, Sequence[str]] = {}
    unannotated: dict[str, tuple[str, ...]] = {}
    skipped: list[str] = []
    for claim_id in sorted(rankings):
        if claim_id not in annotated:
            skipped.append(claim_id)
            log.warning("claim %s has no annotations; excluded from annotated evaluation", claim_id)
            continue
        kept[claim_id] = rankings[claim_id]
        missing = tuple(cid for cid in rankings[claim_id][:k] if cid not in annotated[claim_id])
        if missing:
            unannotated[claim_id] = missing
    metrics = map_at_k(kept, gold, k)
    return AnnotatedEvaluation(
        metrics=metrics, level=level, unannotated=unannotated, skipped_claims=tuple(skipped)
    )


@dataclass(frozen=True, slots=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True, slots=True)
class ClassificationMetrics:
    per_class: Mapping[VerdictLabel, ClassScores]
    micro_f1: float
    confusion: tuple[tuple[int, ...], ...]  # rows gold, columns predicted
    n_claims: int


def classification_report(
    predictions: Mapping[str, VerdictLabel], gold: Mapping[str, VerdictLabel]
) -> ClassificationMetrics:
    """Per-class precision/recall/F1 and micro F1 over the overlapping claims."""
    extra = set(predictions) - set(gold)
    if extra:
        raise EvaluationError(f"predictions for unknown claims: {sorted(extra)[:5]}")
    overlap = sorted(predictions)
    if not overlap:
        raise EvaluationError("no overlapping claims between predictions and gold")
    labels = list(VerdictLabel)
    confusion = [[0] * len(labels) for _ in labels]
    for claim_id in overlap:
        confusion[gold[claim_id]][predictions[claim_id]] += 1
    per_class: dict[VerdictLabel, ClassScores] = {}
    pooled_tp = 0
    for label in labels:
        tp = confusion[label][label]
        fp = sum(confusion[other][label] for other in labels if other != label)
        fn = sum(confusion[label][other] for other in labels if other != label)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[label] = ClassScores(precision, recall, f1, support=tp + fn)
        pooled_tp += tp
    # Single-label multiclass: pooled FP == pooled FN, so micro F1 reduces to
    # accuracy.
    micro_f1 = pooled_tp / len(overlap)
    return ClassificationMetrics(
        per_class=per_class,
        micro_f1=micro_f1,
        confusion=tuple(tuple(row) for row in confusion),
        n_claims=len(overlap),
    )


def format_percent(value: float) -> str:
    """Render a ratio the way the report tables do: percent, two decimals."""
    return f"{100.0 * value:.2f}"


def retrieval_records(
    metrics: RetrievalMetrics,
    modality: Modality,
    stage: str,
    level: AnnotationLevel | None = None,
) -> list[dict]:
    """Machine-readable rows, one per metric."""
    base = {"k": metrics.k, "modality": modality.value, "stage": stage, "n_claims": metrics.n_claims}
    if level is not None:
        base["level"] = level.value
    return [
        {"metric": "precision", "value": metrics.precision, **base},
        {"metric": "recall", "value": metrics.recall, **base},
        {"metric": "map", "value": metrics.mean_ap, **base},
    ]


def render_retrieval_table(records: Sequence[dict]) -> str:
    """Aligned text table of retrieval rows (values in percent, 2 decimals)."""
    has_level = any("level" in record for record in records)
    headers = (["level"] if has_level else []) + ["modality", "stage", "K", "P", "R", "mAP", "claims"]
    grouped: dict[tuple, dict[str, float]] = {}
    meta: dict[tuple, dict] = {}
    for record in records:
        key = (record.get("level", ""), record["modality"], record["stage"], record["k"])
        grouped.setdefault(key, {})[record["metric"]] = record["value"]
        meta[key] = record
    rows = []
    for key in sorted(grouped):
        level, modality, stage, k = key
        values = grouped[key]
        row = ([level] if has_level else []) + [
            modality,
            stage,
            str(k),
            format_percent(values.get("precision", 0.0)),
            format_percent(values.get("recall", 0.0)),
            format_percent(values.get("map", 0.0)),
            str(meta[key]["n_claims"]),
        ]
        rows.append(row)
    widths = [max(len(header), *(len(row[i]) for row in rows)) if rows else len(header)
              for i, header in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def render_classification_table(metrics: ClassificationMetrics) -> str:
    headers = ["class", "P", "R", "F1", "support"]
    rows = []
    for label in VerdictLabel:
        scores = metrics.per_class[label]
        rows.append(
            [label.key, f"{scores.precision:.3f}", f"{scores.recall:.3f}", f"{scores.f1:.3f}", str(scores.support)]
        )
    widths = [max(len(header), *(len(row[i]) for row in rows)) for i, header in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    lines.append(f"micro F1: {metrics.micro_f1:.3f}  ({metrics.n_claims} claims)")
    return "\n".join(lines)
