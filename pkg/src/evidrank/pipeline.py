"""Stage orchestration: retrieve, rerank, verify, evaluate.

Each stage reads its inputs from disk (config paths plus prior-stage artifact
files) and writes one artifact, so running the stages one by one is byte
identical to running the whole pipeline.  Work inside a stage parallelizes
over claims; artifacts are written once, by a single writer, in sorted claim
order, so the output does not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .config import PipelineConfig
from .corpus import Claim, Corpus, Modality, parse_verdict_label
from .errors import (
    ConfigError,
    DegenerateResponseError,
    EvaluationError,
    IntegrityError,
    TransportError,
)
from .index import (
    RankedCandidate,
    Space,
    VectorIndex,
    load_embeddings,
    retrieve_image,
    retrieve_text,
)
from .oracle import (
    STAGE_RELEVANCE,
    HttpOracle,
    HttpOracleConfig,
    MockOracle,
    Oracle,
    OracleRequest,
    OracleResponse,
    build_relevance_prompt,
    get_template,
)
from .rerank import RerankedCandidate, rerank
from .verify import (
    EvidencePair,
    PairModality,
    Verdict,
    Vote,
    form_pairs,
    majority_vote,
    verify_one_level,
    verify_two_level,
)

log = logging.getLogger(__name__)

T = TypeVar("T")

CORPUS_ARTIFACT = "corpus.norm.jsonl"
CLAIMS_ARTIFACT = "claims.norm.jsonl"
RETRIEVAL_ARTIFACT = "retrieval.jsonl"
RERANK_ARTIFACT = "rerank.jsonl"
VERDICTS_ARTIFACT = "verdicts.jsonl"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
REPORT_CSV = "report.csv"

STAGES = ("ingest", "retrieve", "rerank", "verify", "evaluate")

# Consecutive all-failed oracle probes before a batch is declared dead.
_DOWN_PROBE = 8


def _dump_line(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n"


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(_dump_line(record))


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records


def _claim_map(claims: Sequence[Claim]) -> dict[str, Claim]:
    return {claim.claim_id: claim for claim in claims}


def _parallel_over_claims(
    claim_ids: Sequence[str], worker: Callable[[str], T], jobs: int
) -> dict[str, T]:
    """Run the worker per claim; results keyed by claim so output order is fixed."""
    if jobs <= 1 or len(claim_ids) <= 1:
        return {cid: worker(cid) for cid in claim_ids}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(worker, claim_ids)
        return dict(zip(claim_ids, results))


def build_oracle(config: PipelineConfig, model: str | None = None) -> Oracle:
    """Mock oracle when a script is configured, HTTP client otherwise."""
    if config.paths.mock_script is not None:
        return MockOracle.from_file(config.paths.mock_script, on_missing=config.oracle.mock_on_missing)
    if not config.oracle.url:
        raise ConfigError("no oracle configured: set oracle.url (or EVIDRANK_ORACLE_URL) or paths.mock_script")
    return HttpOracle(
        HttpOracleConfig(
            base_url=config.oracle.url,
            model=model or config.oracle.text_model,
            api_key_env=config.oracle.api_key_env,
            timeout=config.oracle.timeout,
            max_attempts=config.oracle.max_attempts,
            backoff_base=config.oracle.backoff_base,
            top_logprobs=config.oracle.top_logprobs,
            max_inflight=config.oracle.max_inflight,
        )
    )


def stage_ingest(config: PipelineConfig) -> None:
    """Validate all inputs and write the normalized corpus/claims artifacts."""
    started = time.monotonic()
    config.out_dir.mkdir(parents=True, exist_ok=True)
    corpus = corpus_mod.load_corpus(config.paths.corpus)
    claims = corpus_mod.load_claims(config.paths.claims)
    index = VectorIndex(load_embeddings(config.paths.embeddings))
    if config.paths.annotations is not None:
        corpus_mod.load_annotations(config.paths.annotations)
    for claim in claims:
        for sent_id in claim.gold_sentence_ids:
            if sent_id not in corpus.sentences:
                raise IntegrityError(f"claim {claim.claim_id}: gold sentence {sent_id!r} not in corpus")
        for image_id in claim.gold_image_ids:
            if image_id not in corpus.images:
                raise IntegrityError(f"claim {claim.claim_id}: gold image {image_id!r} not in corpus")
    corpus_mod.save_corpus(corpus, config.out_dir / CORPUS_ARTIFACT)
    corpus_mod.save_claims(sorted(claims, key=lambda c: c.claim_id), config.out_dir / CLAIMS_ARTIFACT)
    del index  # loaded for validation only
    log.info(
        "stage=ingest docs=%d claims=%d elapsed=%.3fs",
        corpus.n_docs, len(claims), time.monotonic() - started,
    )


def _load_normalized(config: PipelineConfig) -> tuple[Corpus, list[Claim]]:
    corpus = corpus_mod.load_corpus(config.out_dir / CORPUS_ARTIFACT)
    claims = corpus_mod.load_claims(config.out_dir / CLAIMS_ARTIFACT)
    return corpus, claims


def stage_retrieve(config: PipelineConfig) -> None:
    """Initial top-N retrieval per claim and modality."""
    started = time.monotonic()
    corpus, claims = _load_normalized(config)
    index = VectorIndex(load_embeddings(config.paths.embeddings))
    sentence_ids = sorted(corpus.sentences)
    image_ids = sorted(corpus.images)

    def run_claim(claim_id: str) -> list[RankedCandidate]:
        claim = claim_lookup[claim_id]
        out: list[RankedCandidate] = []
        if "text" in config.modalities and sentence_ids:
            out.extend(retrieve_text(claim, index, config.retrieval, sentence_ids))
        if "image" in config.modalities and image_ids:
            out.extend(retrieve_image(claim, index, config.retrieval, image_ids))
        return out

    claim_lookup = _claim_map(claims)
    ordered_ids = sorted(claim_lookup)
    results = _parallel_over_claims(ordered_ids, run_claim, config.jobs)
    records = []
    for claim_id in ordered_ids:
        for cand in results[claim_id]:
            records.append(
                {
                    "claim_id": claim_id,
                    "modality": cand.modality.value,
                    "candidate_id": cand.candidate_id,
                    "initial_score": cand.initial_score,
                    "initial_rank": cand.initial_rank,
                }
            )
    write_jsonl(config.out_dir / RETRIEVAL_ARTIFACT, records)
    log.info("stage=retrieve claims=%d rows=%d elapsed=%.3fs", len(claims), len(records), time.monotonic() - started)


def _read_rankings(path: Path) -> dict[tuple[str, Modality], list[RankedCandidate]]:
    """Group a retrieval artifact back into ranked candidate lists."""
    grouped: dict[tuple[str, Modality], list[RankedCandidate]] = {}
    for record in read_jsonl(path):
        key = (record["claim_id"], Modality(record["modality"]))
        grouped.setdefault(key, []).append(
            RankedCandidate(
                candidate_id=record["candidate_id"],
                modality=Modality(record["modality"]),
                initial_score=float(record["initial_score"]),
                initial_rank=int(record["initial_rank"]),
            )
        )
    for candidates in grouped.values():
        candidates.sort(key=lambda c: c.initial_rank)
    return grouped


def _relevance_requests(
    claim: Claim,
    candidates: Sequence[RankedCandidate],
    corpus: Corpus,
    config: PipelineConfig,
    modality: Modality,
) -> list[OracleRequest]:
    if modality is Modality.TEXT:
        template = get_template(config.relevance_text_template)
        budget = config.oracle.text_char_budget
        model = config.oracle.text_model
        items: dict[str, Any] = corpus.sentences
    else:
        template = get_template(config.relevance_image_template)
        budget = config.oracle.image_char_budget
        model = config.oracle.vision_model
        items = corpus.images
    requests = []
    for cand in candidates:
        prompt = build_relevance_prompt(template, claim, items[cand.candidate_id], budget)
        requests.append(
            OracleRequest(
                prompt=prompt,
                claim_id=claim.claim_id,
                candidate_id=cand.candidate_id,
                stage=STAGE_RELEVANCE,
                model=model,
            )
        )
    return requests


def _ask_batch(oracle: Oracle, requests: Sequence[OracleRequest]) -> list[OracleResponse | None]:
    """One oracle batch; per-request failures come back as None for flagging.

    Transport and degenerate-response failures are candidate-level: the
    candidate is kept, flagged and sunk downstream.  A batch where every
    request failed means the endpoint is down, which aborts the stage.
    Protocol errors (wrong response shape, missing script entry in hard-error
    mode) are systematic and abort immediately.
    """
    if not requests:
        return []
    try:
        return list(oracle.ask_many(requests))
    except (TransportError, DegenerateResponseError):
        pass
    results: list[OracleResponse | None] = []
    first_error: Exception | None = None
    for idx, request in enumerate(requests):
        try:
            results.append(oracle.ask(request))
        except (TransportError, DegenerateResponseError) as exc:
            if first_error is None:
                first_error = exc
            log.warning("oracle failed for %s: %s", request.fingerprint, exc)
            results.append(None)
        # Nothing but failures early on: the endpoint is down, stop probing.
        if idx + 1 >= _DOWN_PROBE and all(r is None for r in results):
            raise TransportError(f"oracle endpoint appears down: {first_error}") from None
    if all(r is None for r in results):
        raise TransportError(
            f"every oracle request in the batch failed (n={len(requests)}): {first_error}"
        ) from None
    return results


def stage_rerank(config: PipelineConfig) -> None:
    """Query the relevance oracle for the retrieved pool and re-rank it."""
    started = time.monotonic()
    corpus, claims = _load_normalized(config)
    claim_lookup = _claim_map(claims)
    rankings = _read_rankings(config.out_dir / RETRIEVAL_ARTIFACT)
    oracle = build_oracle(config)

    def run_claim(claim_id: str) -> list[RerankedCandidate]:
        claim = claim_lookup[claim_id]
        out: list[RerankedCandidate] = []
        for modality in (Modality.TEXT, Modality.IMAGE):
            candidates = rankings.get((claim_id, modality), [])
            if not candidates:
                continue
            requests = _relevance_requests(claim, candidates, corpus, config, modality)
            responses = _ask_batch(oracle, requests)
            out.extend(rerank(candidates, responses, config.rerank))
        return out

    ordered_ids = sorted(claim_lookup)
    results = _parallel_over_claims(ordered_ids, run_claim, config.jobs)
    records = []
    for claim_id in ordered_ids:
        for cand in results[claim_id]:
            records.append(
                {
                    "claim_id": claim_id,
                    "candidate_id": cand.candidate_id,
                    "modality": cand.modality.value,
                    "initial_score": cand.initial_score,
                    "initial_rank": cand.initial_rank,
                    "oracle_class": cand.oracle_class.value,
                    "relevance_score": cand.relevance_score,
                    "final_rank": cand.final_rank,
                    "flags": list(cand.flags),
                }
            )
    write_jsonl(config.out_dir / RERANK_ARTIFACT, records)
    log.info("stage=rerank rows=%d elapsed=%.3fs", len(records), time.monotonic() - started)


def _read_reranked(path: Path) -> dict[tuple[str, Modality], list[dict[str, Any]]]:
    grouped: dict[tuple[str, Modality], list[dict[str, Any]]] = {}
    for record in read_jsonl(path):
        key = (record["claim_id"], Modality(record["modality"]))
        grouped.setdefault(key, []).append(record)
    for records in grouped.values():
        records.sort(key=lambda r: r["final_rank"])
    return grouped


def _verify_claim(
    claim: Claim,
    pairs: Sequence[EvidencePair],
    oracle: Oracle,
    config: PipelineConfig,
) -> Verdict | None:
    if not pairs:
        log.warning("claim %s has no evidence pairs; no verdict", claim.claim_id)
        return None
    votes: list[Vote] = []
    for pair in pairs:
        if pair.modality is PairModality.TEXT_ONLY:
            mode = config.verify.text_prompting
            model = config.oracle.text_model
        else:
            mode = config.verify.multimodal_prompting
            model = config.oracle.vision_model if pair.image_uris else config.oracle.text_model
        if mode == "one_level":
            votes.append(
                verify_one_level(
                    pair, claim, oracle, get_template(config.verify.one_level_template),
                    model=model, tie_priority=config.verify.tie_priority,
                )
            )
        else:
            votes.append(
                verify_two_level(
                    pair, claim, oracle,
                    get_template(config.verify.sufficiency_template),
                    get_template(config.verify.stance_template),
                    model=model,
                )
            )
    return majority_vote(votes, claim.claim_id, config.verify.tie_priority)


def stage_verify(config: PipelineConfig) -> None:
    """Form evidence pairs from the re-ranked pool and elect a verdict per claim."""
    started = time.monotonic()
    corpus, claims = _load_normalized(config)
    claim_lookup = _claim_map(claims)
    reranked = _read_reranked(config.out_dir / RERANK_ARTIFACT)
    index = VectorIndex(load_embeddings(config.paths.embeddings))
    oracle = build_oracle(config)
    k = config.retrieval.k_evidence

    def full_scores(claim: Claim, modality: Modality) -> dict[str, float]:
        # Companion selection ranks same-document items by their own cosine
        # against the claim, which may include items outside the top-N pool.
        space = Space.TEXT if modality is Modality.TEXT else Space.CROSSMODAL
        ids = sorted(corpus.sentences) if modality is Modality.TEXT else sorted(corpus.images)
        ids = [i for i in ids if index.has(space, i)]
        if not ids or not index.has(space, claim.claim_id):
            return {}
        return dict(zip(ids, index.scores(space, claim.claim_id, ids)))

    def run_claim(claim_id: str) -> Verdict | None:
        claim = claim_lookup[claim_id]
        text_ids = [r["candidate_id"] for r in reranked.get((claim_id, Modality.TEXT), [])[:k]]
        image_ids = [r["candidate_id"] for r in reranked.get((claim_id, Modality.IMAGE), [])[:k]]
        modality = config.verify.modality
        pairs = form_pairs(
            claim,
            text_ids,
            image_ids if modality is PairModality.MULTIMODAL else [],
            corpus,
            modality,
            companion_images=config.verify.companion_images,
            companion_sentences=config.verify.companion_sentences,
            text_scores=full_scores(claim, Modality.TEXT) if modality is PairModality.MULTIMODAL else None,
            image_scores=full_scores(claim, Modality.IMAGE) if modality is PairModality.MULTIMODAL else None,
        )
        return _verify_claim(claim, pairs, oracle, config)

    ordered_ids = sorted(claim_lookup)
    results = _parallel_over_claims(ordered_ids, run_claim, config.jobs)
    records = []
    for claim_id in ordered_ids:
        verdict = results[claim_id]
        if verdict is None:
            continue
        records.append(
            {
                "claim_id": claim_id,
                "label": verdict.label.key,
                "decision_basis": verdict.decision_basis.value,
                "votes": [
                    {
                        "pair": vote.pair_ref,
                        "label": vote.label.key,
                        "confidence": vote.confidence,
                    }
                    | (
                        {
                            "level_trace": [
                                vote.level_trace[0].value,
                                vote.level_trace[1].value if vote.level_trace[1] else None,
                            ]
                        }
                        if vote.level_trace
                        else {}
                    )
                    for vote in verdict.votes
                ],
            }
        )
    write_jsonl(config.out_dir / VERDICTS_ARTIFACT, records)
    log.info("stage=verify verdicts=%d elapsed=%.3fs", len(records), time.monotonic() - started)


def _rankings_by_modality(
    grouped: dict[tuple[str, Modality], list[Any]],
    modality: Modality,
    id_getter: Callable[[Any], str],
) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for (claim_id, mod), items in grouped.items():
        if mod is modality:
            out[claim_id] = [id_getter(item) for item in items]
    return out


def stage_evaluate(config: PipelineConfig, write_csv: bool = False) -> dict[str, Any]:
    """Score both retrieval stages and the verdicts; write the report files."""
    started = time.monotonic()
    _, claims = _load_normalized(config)
    claim_lookup = _claim_map(claims)
    initial = _read_rankings(config.out_dir / RETRIEVAL_ARTIFACT)
    reranked = _read_reranked(config.out_dir / RERANK_ARTIFACT)

    retrieval_rows: list[dict[str, Any]] = []
    for modality in (Modality.TEXT, Modality.IMAGE):
        if modality.value not in config.modalities:
            continue
        stage_rankings = {
            "initial": _rankings_by_modality(initial, modality, lambda c: c.candidate_id),
            "reranked": _rankings_by_modality(reranked, modality, lambda r: r["candidate_id"]),
        }
        golds = {
            claim.claim_id: claim.gold_ids(modality)
            for claim in claims
            if claim.gold_ids(modality)
        }
        if not golds:
            log.warning("no gold %s evidence; skipping %s retrieval metrics", modality.value, modality.value)
            continue
        for stage, rankings in stage_rankings.items():
            if not rankings:
                continue
            for k in config.retrieval.k_values:
                metrics = metrics_mod.map_at_k(
                    rankings, golds, k, include_empty_gold=config.evaluate.include_empty_gold
                )
                retrieval_rows.extend(metrics_mod.retrieval_records(metrics, modality, stage))

    annotated_rows: list[dict[str, Any]] = []
    coverage: dict[str, Any] = {}
    if config.paths.annotations is not None:
        annotations = corpus_mod.load_annotations(config.paths.annotations)
        for modality in (Modality.TEXT, Modality.IMAGE):
            if modality.value not in config.modalities:
                continue
            for stage, grouped in (("initial", initial), ("reranked", reranked)):
                rankings = _rankings_by_modality(
                    grouped, modality, (lambda c: c.candidate_id) if stage == "initial" else (lambda r: r["candidate_id"])
                )
                if not rankings:
                    continue
                for level in config.evaluate.annotation_levels:
                    for k in config.retrieval.k_values:
                        result = metrics_mod.evaluate_with_annotations(
                            rankings, annotations, level, k, modality
                        )
                        annotated_rows.extend(
                            metrics_mod.retrieval_records(result.metrics, modality, stage, level)
                        )
                        if result.unannotated:
                            coverage.setdefault(f"{modality.value}/{stage}/{level.value}@{k}", {}).update(
                                {cid: list(ids) for cid, ids in sorted(result.unannotated.items())}
                            )

    report: dict[str, Any] = {"retrieval": retrieval_rows}
    if annotated_rows:
        report["annotated_retrieval"] = annotated_rows
        report["annotation_coverage"] = coverage
    have_verdict_gold = (config.out_dir / VERDICTS_ARTIFACT).exists() and any(
        claim.gold_label is not None for claim in claims
    )
    if not retrieval_rows and not annotated_rows and not have_verdict_gold:
        raise EvaluationError(
            "nothing to evaluate: no claim has gold evidence, annotations, or a gold label"
        )

    verdict_path = config.out_dir / VERDICTS_ARTIFACT
    classification = None
    if verdict_path.exists():
        predictions = {
            record["claim_id"]: parse_verdict_label(record["label"]) for record in read_jsonl(verdict_path)
        }
        gold_labels = {
            claim.claim_id: claim.gold_label for claim in claims if claim.gold_label is not None
        }
        predictions = {cid: label for cid, label in predictions.items() if cid in gold_labels}
        if predictions:
            classification = metrics_mod.classification_report(predictions, gold_labels)
            report["verification"] = {
                "micro_f1": classification.micro_f1,
                "n_claims": classification.n_claims,
                "per_class": {
                    label.key: {
                        "precision": scores.precision,
                        "recall": scores.recall,
                        "f1": scores.f1,
                        "support": scores.support,
                    }
                    for label, scores in classification.per_class.items()
                },
                "confusion": [list(row) for row in classification.confusion],
            }

    report_json = json.dumps(report, ensure_ascii=False, sort_keys=True, indent=2) + "\n"
    (config.out_dir / REPORT_JSON).write_text(report_json, encoding="utf-8")

    lines = ["Retrieval metrics (percent; AP denominator min(|gold|, K))", ""]
    if retrieval_rows:
        lines.append(metrics_mod.render_retrieval_table(retrieval_rows))
    else:
        lines.append("(no gold evidence; retrieval not scored)")
    if annotated_rows:
        lines += ["", "Annotated retrieval metrics (percent)", "", metrics_mod.render_retrieval_table(annotated_rows)]
    if classification is not None:
        lines += ["", "Verification", "", metrics_mod.render_classification_table(classification)]
    (config.out_dir / REPORT_TEXT).write_text("\n".join(lines) + "\n", encoding="utf-8")

    if write_csv:
        csv_lines = ["metric,k,modality,stage,level,value,n_claims"]
        for row in retrieval_rows + annotated_rows:
            csv_lines.append(
                f"{row['metric']},{row['k']},{row['modality']},{row['stage']},"
                f"{row.get('level', '')},{row['value']!r},{row['n_claims']}"
            )
        (config.out_dir / REPORT_CSV).write_text("\n".join(csv_lines) + "\n", encoding="utf-8")

    log.info("stage=evaluate rows=%d elapsed=%.3fs", len(retrieval_rows), time.monotonic() - started)
    return report


def run_stage(config: PipelineConfig, stage: str, write_csv: bool = False) -> None:
    if stage == "ingest":
        stage_ingest(config)
    elif stage == "retrieve":
        stage_retrieve(config)
    elif stage == "rerank":
        stage_rerank(config)
    elif stage == "verify":
        stage_verify(config)
    elif stage == "evaluate":
        stage_evaluate(config, write_csv=write_csv)
    else:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")


def run_pipeline(config: PipelineConfig, write_csv: bool = False) -> None:
    """All five stages in order, each reading the previous stage's artifact."""
    for stage in STAGES:
        run_stage(config, stage, write_csv=write_csv)
