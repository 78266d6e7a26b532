"""Claim verdict prediction from retrieved evidence.

Each retrieved item becomes a claim-evidence pair (optionally augmented with
same-document companions), each pair is put to the oracle in one of two
prompting modes, and the per-pair votes are pooled into a single majority
election per claim.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import Claim, Corpus, ImageRef, Sentence, VerdictLabel
from .errors import ContractError, DegenerateResponseError, IntegrityError
from .oracle import (
    STAGE_ONE_LEVEL,
    STAGE_STANCE,
    STAGE_SUFFICIENCY,
    NAMED_CLASSES,
    Oracle,
    OracleRequest,
    OracleResponse,
    PromptTemplate,
    RenderedPrompt,
    TokenClassName,
    render_image_query,
    render_text_pair,
)

# Tie order everywhere a probability tie must still produce a label: prefer
# abstention, then the negative class.
DEFAULT_TIE_PRIORITY: tuple[VerdictLabel, ...] = (
    VerdictLabel.NEI,
    VerdictLabel.REFUTED,
    VerdictLabel.SUPPORTED,
)

_LABEL_BY_CLASS = {
    TokenClassName.YES: VerdictLabel.SUPPORTED,
    TokenClassName.NO: VerdictLabel.REFUTED,
    TokenClassName.NONE: VerdictLabel.NEI,
}


class PairModality(str, enum.Enum):
    TEXT_ONLY = "text_only"
    MULTIMODAL = "multimodal"


class DecisionBasis(str, enum.Enum):
    MAJORITY = "majority"
    PROBABILITY_TIE_BREAK = "probability_tie_break"
    PRIORITY_TIE_BREAK = "priority_tie_break"


@dataclass(frozen=True, slots=True)
class EvidencePair:
    """One retrieved anchor plus same-document companions."""

    claim_id: str
    anchor: Sentence | ImageRef
    companions: tuple[Sentence | ImageRef, ...]
    modality: PairModality

    def __post_init__(self) -> None:
        if self.modality is PairModality.TEXT_ONLY:
            if not isinstance(self.anchor, Sentence) or self.companions:
                raise IntegrityError("text-only pairs are a bare sentence anchor")
        for companion in self.companions:
            if companion.doc_id != self.anchor.doc_id:
                raise IntegrityError(
                    f"companion {_item_id(companion)!r} is not from the anchor's document"
                )

    @property
    def pair_id(self) -> str:
        return _item_id(self.anchor)

    @property
    def evidence_text(self) -> str:
        parts = []
        if isinstance(self.anchor, Sentence):
            parts.append(self.anchor.text)
        parts.extend(c.text for c in self.companions if isinstance(c, Sentence))
        return " ".join(parts)

    @property
    def image_uris(self) -> tuple[str, ...]:
        uris = []
        if isinstance(self.anchor, ImageRef):
            uris.append(self.anchor.uri)
        uris.extend(c.uri for c in self.companions if isinstance(c, ImageRef))
        return tuple(uris)


def _item_id(item: Sentence | ImageRef) -> str:
    return item.sent_id if isinstance(item, Sentence) else item.image_id


@dataclass(frozen=True, slots=True)
class Vote:
    pair_ref: str
    label: VerdictLabel
    confidence: float
    level_trace: tuple[TokenClassName, TokenClassName | None] | None = None


@dataclass(frozen=True, slots=True)
class Verdict:
    claim_id: str
    label: VerdictLabel
    votes: tuple[Vote, ...]
    decision_basis: DecisionBasis


def _ranked_companions(
    items: Sequence[Sentence] | Sequence[ImageRef],
    scores: Mapping[str, float] | None,
    cap: int,
) -> tuple[Sentence | ImageRef, ...]:
    """Top companions by cosine score where known, document order otherwise."""
    if cap <= 0:
        return ()
    if scores:
        def sort_key(item: Sentence | ImageRef) -> tuple[float, str]:
            return (-scores.get(_item_id(item), float("-inf")), _item_id(item))
        return tuple(sorted(items, key=sort_key)[:cap])
    return tuple(items[:cap])


def form_pairs(
    claim: Claim,
    text_evidence: Sequence[str],
    image_evidence: Sequence[str],
    corpus: Corpus,
    modality: PairModality,
    companion_images: int = 3,
    companion_sentences: int = 3,
    text_scores: Mapping[str, float] | None = None,
    image_scores: Mapping[str, float] | None = None,
) -> list[EvidencePair]:
    """Build claim-evidence pairs from the final retrieved ids.

    Text-only mode pairs the claim with each retrieved sentence.  Multimodal
    mode additionally augments sentence anchors with their document's images
    and image anchors with their document's best sentences; companions are
    capped and chosen by initial cosine score when scores are available.
    """
    pairs: list[EvidencePair] = []
    for sent_id in text_evidence:
        sentence = corpus.sentences.get(sent_id)
        if sentence is None:
            raise IntegrityError(f"retrieved sentence {sent_id!r} is not in the corpus")
        if modality is PairModality.TEXT_ONLY:
            pairs.append(EvidencePair(claim.claim_id, sentence, (), modality))
        else:
            doc = corpus.docs[sentence.doc_id]
            companions = _ranked_companions(doc.images, image_scores, companion_images)
            pairs.append(EvidencePair(claim.claim_id, sentence, companions, modality))
    if modality is PairModality.MULTIMODAL:
        for image_id in image_evidence:
            image = corpus.images.get(image_id)
            if image is None:
                raise IntegrityError(f"retrieved image {image_id!r} is not in the corpus")
            doc = corpus.docs[image.doc_id]
            companions = _ranked_companions(doc.sentences, text_scores, companion_sentences)
            pairs.append(EvidencePair(claim.claim_id, image, companions, modality))
    return pairs


def build_verdict_prompt(template: PromptTemplate, claim: Claim, pair: EvidencePair) -> RenderedPrompt:
    """Render a verification prompt for one pair.

    Pairs that carry text render as a query/corpus prompt with any images
    attached; image-only pairs fall back to the bare query layout.
    """
    evidence_text = pair.evidence_text
    if evidence_text:
        return RenderedPrompt(
            render_text_pair(template, claim.text, evidence_text),
            image_uris=pair.image_uris,
        )
    return RenderedPrompt(render_image_query(template, claim.text), image_uris=pair.image_uris)


def _three_way(resp: OracleResponse, tie_priority: Sequence[VerdictLabel]) -> tuple[VerdictLabel, float, TokenClassName]:
    """Argmax over the renormalized yes/no/none masses, ties by priority."""
    total = sum(resp.mass(name) for name in NAMED_CLASSES)
    if total <= 0.0:
        raise DegenerateResponseError("yes, no and none classes all have zero mass")
    best_class = max(
        NAMED_CLASSES,
        key=lambda name: (resp.mass(name), -tie_priority.index(_LABEL_BY_CLASS[name])),
    )
    return _LABEL_BY_CLASS[best_class], resp.mass(best_class) / total, best_class


def _two_way(resp: OracleResponse) -> tuple[TokenClassName, float]:
    """Yes/no decision with renormalized confidence; exact tie goes to NO."""
    yes = resp.mass(TokenClassName.YES)
    no = resp.mass(TokenClassName.NO)
    if yes + no <= 0.0:
        raise DegenerateResponseError("yes and no classes both have zero mass")
    p_yes = yes / (yes + no)
    if p_yes > 0.5:
        return TokenClassName.YES, p_yes
    return TokenClassName.NO, 1.0 - p_yes


def verify_one_level(
    pair: EvidencePair,
    claim: Claim,
    oracle: Oracle,
    template: PromptTemplate,
    model: str | None = None,
    tie_priority: Sequence[VerdictLabel] = DEFAULT_TIE_PRIORITY,
) -> Vote:
    """Single question mapping yes/no/none straight onto the three labels."""
    request = OracleRequest(
        prompt=build_verdict_prompt(template, claim, pair),
        claim_id=claim.claim_id,
        candidate_id=pair.pair_id,
        stage=STAGE_ONE_LEVEL,
        model=model,
    )
    label, confidence, answer = _three_way(oracle.ask(request), tie_priority)
    return Vote(pair_ref=pair.pair_id, label=label, confidence=confidence, level_trace=(answer, None))


def verify_two_level(
    pair: EvidencePair,
    claim: Claim,
    oracle: Oracle,
    sufficiency_template: PromptTemplate,
    stance_template: PromptTemplate,
    model: str | None = None,
) -> Vote:
    """Sufficiency question first; only sufficient pairs get the stance question."""
    sufficiency_request = OracleRequest(
        prompt=build_verdict_prompt(sufficiency_template, claim, pair),
        claim_id=claim.claim_id,
        candidate_id=pair.pair_id,
        stage=STAGE_SUFFICIENCY,
        model=model,
    )
    sufficiency, confidence = _two_way(oracle.ask(sufficiency_request))
    if sufficiency is TokenClassName.NO:
        return Vote(
            pair_ref=pair.pair_id,
            label=VerdictLabel.NEI,
            confidence=confidence,
            level_trace=(TokenClassName.NO, None),
        )
    stance_request = OracleRequest(
        prompt=build_verdict_prompt(stance_template, claim, pair),
        claim_id=claim.claim_id,
        candidate_id=pair.pair_id,
        stage=STAGE_STANCE,
        model=model,
    )
    stance, confidence = _two_way(oracle.ask(stance_request))
    label = VerdictLabel.SUPPORTED if stance is TokenClassName.YES else VerdictLabel.REFUTED
    return Vote(
        pair_ref=pair.pair_id,
        label=label,
        confidence=confidence,
        level_trace=(TokenClassName.YES, stance),
    )


def majority_vote(
    votes: Sequence[Vote],
    claim_id: str,
    tie_priority: Sequence[VerdictLabel] = DEFAULT_TIE_PRIORITY,
) -> Verdict:
    """Elect the claim label from its per-pair votes.

    Most votes wins; a count tie goes to the tied label holding the single
    most confident vote; a confidence tie falls back to the fixed priority
    order.
    """
    if not votes:
        raise ContractError("majority_vote needs at least one vote")
    counts: dict[VerdictLabel, int] = {}
    best_conf: dict[VerdictLabel, float] = {}
    for vote in votes:
        counts[vote.label] = counts.get(vote.label, 0) + 1
        best_conf[vote.label] = max(best_conf.get(vote.label, 0.0), vote.confidence)
    top_count = max(counts.values())
    tied = [label for label, count in counts.items() if count == top_count]
    if len(tied) == 1:
        return Verdict(claim_id, tied[0], tuple(votes), DecisionBasis.MAJORITY)
    top_conf = max(best_conf[label] for label in tied)
    confident = [label for label in tied if best_conf[label] == top_conf]
    if len(confident) == 1:
        return Verdict(claim_id, confident[0], tuple(votes), DecisionBasis.PROBABILITY_TIE_BREAK)
    winner = min(confident, key=tie_priority.index)
    return Verdict(claim_id, winner, tuple(votes), DecisionBasis.PRIORITY_TIE_BREAK)
