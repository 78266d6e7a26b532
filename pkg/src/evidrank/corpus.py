"""Claims, evidence documents, relevance annotations, and their file formats.

All record files are UTF-8, one JSON object per line.  Loaded objects are
frozen; a corpus is safe to share across worker threads.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import IntegrityError, LabelMappingError, ParseError


class VerdictLabel(enum.IntEnum):
    """Three-way claim verdict."""

    REFUTED = 0
    SUPPORTED = 1
    NEI = 2

    @property
    def key(self) -> str:
        return self.name.lower()


_LABEL_BY_KEY = {label.key: label for label in VerdictLabel}


def parse_verdict_label(raw: str) -> VerdictLabel:
    try:
        return _LABEL_BY_KEY[raw.strip().lower()]
    except KeyError:
        raise LabelMappingError(f"unknown verdict label {raw!r}") from None


_FACTIFY_COLLAPSE = {
    "Support_Text": VerdictLabel.SUPPORTED,
    "Support_Multimodal": VerdictLabel.SUPPORTED,
    "Insufficient_Text": VerdictLabel.NEI,
    "Insufficient_Multimodal": VerdictLabel.NEI,
    "Refute": VerdictLabel.REFUTED,
}


def collapse_factify_labels(raw: str) -> VerdictLabel:
    """Collapse the five fine-grained source labels onto the three verdict classes."""
    try:
        return _FACTIFY_COLLAPSE[raw]
    except KeyError:
        raise LabelMappingError(f"no 3-class mapping for label {raw!r}") from None


class Modality(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"


@dataclass(frozen=True, slots=True)
class Sentence:
    sent_id: str
    doc_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.sent_id:
            raise IntegrityError("sentence id must be non-empty")
        if not self.text.strip():
            raise IntegrityError(f"sentence {self.sent_id!r} has empty text")


@dataclass(frozen=True, slots=True)
class ImageRef:
    """An image carried as an opaque locator; pixels are never decoded here."""

    image_id: str
    doc_id: str
    uri: str
    alt_text: str | None = None

    def __post_init__(self) -> None:
        if not self.image_id:
            raise IntegrityError("image id must be non-empty")
        if not self.uri:
            raise IntegrityError(f"image {self.image_id!r} has empty uri")


@dataclass(frozen=True, slots=True)
class EvidenceDoc:
    doc_id: str
    sentences: tuple[Sentence, ...] = ()
    images: tuple[ImageRef, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise IntegrityError("doc id must be non-empty")
        if not self.sentences and not self.images:
            raise IntegrityError(f"document {self.doc_id!r} has neither sentences nor images")


@dataclass(frozen=True, slots=True)
class Claim:
    claim_id: str
    text: str
    gold_label: VerdictLabel | None = None
    gold_sentence_ids: frozenset[str] = frozenset()
    gold_image_ids: frozenset[str] = frozenset()
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.claim_id:
            raise IntegrityError("claim id must be non-empty")
        if not self.text.strip():
            raise IntegrityError(f"claim {self.claim_id!r} has empty text")

    def gold_ids(self, modality: Modality) -> frozenset[str]:
        return self.gold_sentence_ids if modality is Modality.TEXT else self.gold_image_ids


@dataclass(frozen=True, slots=True)
class RelevanceAnnotation:
    """Human relevance judgment for one (claim, candidate) at three tiers.

    ``entity_level`` marks topical overlap only, ``evidence_level`` marks
    direct probative value, and ``overall`` must equal their disjunction.
    """

    claim_id: str
    candidate_id: str
    modality: Modality
    entity_level: bool
    evidence_level: bool
    overall: bool

    def __post_init__(self) -> None:
        if self.overall != (self.entity_level or self.evidence_level):
            raise IntegrityError(
                f"annotation ({self.claim_id!r}, {self.candidate_id!r}): "
                "overall must equal entity_level OR evidence_level"
            )


class AnnotationLevel(str, enum.Enum):
    ENTITY = "entity"
    EVIDENCE = "evidence"
    OVERALL = "overall"


def annotation_is_relevant(ann: RelevanceAnnotation, level: AnnotationLevel) -> bool:
    if level is AnnotationLevel.ENTITY:
        return ann.entity_level
    if level is AnnotationLevel.EVIDENCE:
        return ann.evidence_level
    return ann.overall


# Sentence-final punctuation followed by whitespace ends a segment unless the
# word it closes is a known abbreviation.
_BREAK = re.compile(r"[.!?]+(?=\s)")

DEFAULT_ABBREVIATIONS = frozenset(
    {
        "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "rev.",
        "vs.", "etc.", "e.g.", "i.e.", "cf.", "al.", "inc.", "ltd.", "co.",
        "corp.", "no.", "nos.", "fig.", "figs.", "vol.", "pp.", "approx.",
        "u.s.", "u.k.", "u.n.", "d.c.", "a.m.", "p.m.",
    }
)


def segment_document(raw_text: str, abbreviations: frozenset[str] = DEFAULT_ABBREVIATIONS) -> list[str]:
    """Split raw text into sentence strings.

    Deterministic heuristic: break after ``. ! ?`` followed by whitespace,
    except when the closing word is in the abbreviation stoplist.  Segments
    are trimmed and empty ones dropped; pre-segmented corpora should bypass
    this entirely.
    """
    segments: list[str] = []
    start = 0
    for match in _BREAK.finditer(raw_text):
        end = match.end()
        word = raw_text[:end].rsplit(None, 1)[-1]
        if word.lower().lstrip("\"'([{") in abbreviations:
            continue
        piece = raw_text[start:end].strip()
        if piece:
            segments.append(piece)
        start = end
    tail = raw_text[start:].strip()
    if tail:
        segments.append(tail)
    return segments


@dataclass(frozen=True, slots=True)
class Corpus:
    """Evidence documents plus global id indexes; immutable after load."""

    docs: dict[str, EvidenceDoc]
    sentences: dict[str, Sentence]
    images: dict[str, ImageRef]

    @property
    def n_docs(self) -> int:
        return len(self.docs)

    def doc_for(self, candidate_id: str) -> EvidenceDoc:
        """Resolve a sentence or image id to its document."""
        item: Sentence | ImageRef | None = self.sentences.get(candidate_id) or self.images.get(candidate_id)
        if item is None:
            raise IntegrityError(f"candidate id {candidate_id!r} is not in the corpus")
        return self.docs[item.doc_id]


def build_corpus(docs: Iterable[EvidenceDoc]) -> Corpus:
    doc_map: dict[str, EvidenceDoc] = {}
    sent_map: dict[str, Sentence] = {}
    image_map: dict[str, ImageRef] = {}
    for doc in docs:
        if doc.doc_id in doc_map:
            raise IntegrityError(f"duplicate doc_id {doc.doc_id!r}")
        doc_map[doc.doc_id] = doc
        for sent in doc.sentences:
            if sent.sent_id in sent_map or sent.sent_id in image_map:
                raise IntegrityError(f"duplicate candidate id {sent.sent_id!r}")
            sent_map[sent.sent_id] = sent
        for image in doc.images:
            if image.image_id in image_map or image.image_id in sent_map:
                raise IntegrityError(f"duplicate candidate id {image.image_id!r}")
            image_map[image.image_id] = image
    return Corpus(docs=doc_map, sentences=sent_map, images=image_map)


def _iter_records(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", path=str(path), line=lineno) from None
            if not isinstance(record, dict):
                raise ParseError("record is not an object", path=str(path), line=lineno)
            yield lineno, record


def _require(record: dict[str, Any], key: str, path: str, lineno: int) -> Any:
    if key not in record:
        raise ParseError(f"record is missing {key!r}", path=path, line=lineno)
    return record[key]


_DOC_KEYS = {"doc_id", "sentences", "images", "raw_text"}


def _doc_from_record(record: dict[str, Any], path: str, lineno: int) -> EvidenceDoc:
    doc_id = str(_require(record, "doc_id", path, lineno))
    sentences: list[Sentence] = []
    images: list[ImageRef] = []
    try:
        if "sentences" in record:
            for entry in record["sentences"]:
                sentences.append(
                    Sentence(
                        sent_id=str(entry["sent_id"]),
                        doc_id=doc_id,
                        text=str(entry["text"]),
                    )
                )
        elif "raw_text" in record:
            for k, text in enumerate(segment_document(str(record["raw_text"]))):
                sentences.append(Sentence(sent_id=f"{doc_id}-s{k}", doc_id=doc_id, text=text))
        for k, entry in enumerate(record.get("images", ())):
            images.append(
                ImageRef(
                    image_id=str(entry.get("image_id", f"{doc_id}-i{k}")),
                    doc_id=doc_id,
                    uri=str(entry["uri"]),
                    alt_text=entry.get("alt_text"),
                )
            )
    except KeyError as exc:
        raise ParseError(f"document {doc_id!r} record is missing {exc.args[0]!r}", path=path, line=lineno) from None
    extra = {k: v for k, v in record.items() if k not in _DOC_KEYS}
    return EvidenceDoc(doc_id=doc_id, sentences=tuple(sentences), images=tuple(images), extra=extra)


def load_corpus(path: str | Path) -> Corpus:
    """Load a line-delimited document file into an indexed corpus."""
    docs = []
    for lineno, record in _iter_records(path):
        docs.append(_doc_from_record(record, str(path), lineno))
    return build_corpus(docs)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back out in the same line-delimited format (canonical key order)."""
    with open(path, "w", encoding="utf-8") as handle:
        for doc_id in sorted(corpus.docs):
            doc = corpus.docs[doc_id]
            record: dict[str, Any] = {"doc_id": doc.doc_id}
            record["sentences"] = [{"sent_id": s.sent_id, "text": s.text} for s in doc.sentences]
            record["images"] = [
                {"image_id": i.image_id, "uri": i.uri}
                | ({"alt_text": i.alt_text} if i.alt_text is not None else {})
                for i in doc.images
            ]
            record.update(doc.extra)
            handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


_CLAIM_KEYS = {"claim_id", "text", "gold_label", "gold_sentence_ids", "gold_image_ids"}


def load_claims(path: str | Path) -> list[Claim]:
    claims: list[Claim] = []
    seen: set[str] = set()
    for lineno, record in _iter_records(path):
        claim_id = str(_require(record, "claim_id", str(path), lineno))
        if claim_id in seen:
            raise IntegrityError(f"duplicate claim_id {claim_id!r}")
        seen.add(claim_id)
        gold_label = None
        if record.get("gold_label") is not None:
            gold_label = parse_verdict_label(str(record["gold_label"]))
        claims.append(
            Claim(
                claim_id=claim_id,
                text=str(_require(record, "text", str(path), lineno)),
                gold_label=gold_label,
                gold_sentence_ids=frozenset(map(str, record.get("gold_sentence_ids", ()))),
                gold_image_ids=frozenset(map(str, record.get("gold_image_ids", ()))),
                extra={k: v for k, v in record.items() if k not in _CLAIM_KEYS},
            )
        )
    return claims


def save_claims(claims: Iterable[Claim], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for claim in claims:
            record: dict[str, Any] = {"claim_id": claim.claim_id, "text": claim.text}
            if claim.gold_label is not None:
                record["gold_label"] = claim.gold_label.key
            if claim.gold_sentence_ids:
                record["gold_sentence_ids"] = sorted(claim.gold_sentence_ids)
            if claim.gold_image_ids:
                record["gold_image_ids"] = sorted(claim.gold_image_ids)
            record.update(claim.extra)
            handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def load_annotations(path: str | Path) -> list[RelevanceAnnotation]:
    """Load relevance annotations, rejecting records that break the overall invariant."""
    annotations: list[RelevanceAnnotation] = []
    for lineno, record in _iter_records(path):
        claim_id = str(_require(record, "claim_id", str(path), lineno))
        candidate_id = str(_require(record, "candidate_id", str(path), lineno))
        try:
            modality = Modality(str(_require(record, "modality", str(path), lineno)))
        except ValueError:
            raise ParseError(f"unknown modality {record['modality']!r}", path=str(path), line=lineno) from None
        annotations.append(
            RelevanceAnnotation(
                claim_id=claim_id,
                candidate_id=candidate_id,
                modality=modality,
                entity_level=bool(_require(record, "entity_level", str(path), lineno)),
                evidence_level=bool(_require(record, "evidence_level", str(path), lineno)),
                overall=bool(_require(record, "overall", str(path), lineno)),
            )
        )
    return annotations
