"""Embedding storage and initial retrieval by exact cosine similarity.

Embeddings arrive precomputed (this package never runs an encoder).  Claims
and sentences live in the text space; claims and images share the crossmodal
space.  Retrieval is an exact full scan: top-N selection over every candidate,
decreasing score, ids ascending on ties, so results are reproducible bit for
bit and trivially checkable against a brute-force sort.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Iterable, Sequence

import numpy as np

from .corpus import Claim, Modality
from .errors import IntegrityError, MissingEmbeddingError, ParseError


class Space(str, enum.Enum):
    TEXT = "text"
    CROSSMODAL = "crossmodal"


@dataclass(frozen=True, slots=True, eq=False)
class EmbeddingRecord:
    """One id's vector in one space; float32 throughout."""

    id: str
    space: Space
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float32)
        object.__setattr__(self, "vector", vec)
        if vec.ndim != 1 or vec.size == 0:
            raise IntegrityError(f"embedding {self.id!r}: vector must be a non-empty 1-d array")
        if not np.all(np.isfinite(vec)):
            raise IntegrityError(f"embedding {self.id!r}: vector has non-finite entries")
        if float(np.dot(vec.astype(np.float64), vec.astype(np.float64))) == 0.0:
            raise IntegrityError(f"embedding {self.id!r}: vector has zero norm")


@dataclass(frozen=True, slots=True)
class RankedCandidate:
    candidate_id: str
    modality: Modality
    initial_score: float
    initial_rank: int


@dataclass(frozen=True, slots=True)
class RetrievalConfig:
    n: int = 100
    k_values: tuple[int, ...] = (1, 2, 5, 10)
    k_evidence: int = 5

    def __post_init__(self) -> None:
        if self.n < 1:
            raise IntegrityError("retrieval pool size N must be >= 1")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise IntegrityError("K values must be positive")
        if max(self.k_values) > self.n:
            raise IntegrityError(f"K exceeds N: max K {max(self.k_values)} > N {self.n}")
        if not 1 <= self.k_evidence <= self.n:
            raise IntegrityError(f"K_evidence must be in [1, N], got {self.k_evidence}")


def cosine(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity, computed in float64 and clamped to [-1, 1]."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise IntegrityError(f"cosine: dimension mismatch {a.shape} vs {b.shape}")
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise IntegrityError("cosine: zero-norm vector")
    return min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))


class VectorIndex:
    """Immutable per-space matrix of embeddings with id lookup."""

    def __init__(self, records: Iterable[EmbeddingRecord]):
        vectors: dict[Space, list[np.ndarray]] = {space: [] for space in Space}
        ids: dict[Space, list[str]] = {space: [] for space in Space}
        rows: dict[Space, dict[str, int]] = {space: {} for space in Space}
        dims: dict[Space, int] = {}
        for rec in records:
            if rec.id in rows[rec.space]:
                raise IntegrityError(f"duplicate embedding id {rec.id!r} in space {rec.space.value!r}")
            dim = dims.setdefault(rec.space, rec.vector.size)
            if rec.vector.size != dim:
                raise IntegrityError(
                    f"embedding {rec.id!r}: dimension {rec.vector.size} != {dim} in space {rec.space.value!r}"
                )
            rows[rec.space][rec.id] = len(ids[rec.space])
            ids[rec.space].append(rec.id)
            vectors[rec.space].append(rec.vector)
        self._ids = {space: tuple(ids[space]) for space in Space}
        self._rows = rows
        self._matrix = {
            space: (np.vstack(vectors[space]) if vectors[space] else np.zeros((0, 0), dtype=np.float32))
            for space in Space
        }

    def ids(self, space: Space) -> tuple[str, ...]:
        return self._ids[space]

    def has(self, space: Space, item_id: str) -> bool:
        return item_id in self._rows[space]

    def dim(self, space: Space) -> int:
        return int(self._matrix[space].shape[1])

    def vector(self, space: Space, item_id: str) -> np.ndarray:
        try:
            row = self._rows[space][item_id]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for {item_id!r} in space {space.value!r}") from None
        return self._matrix[space][row]

    def scores(self, space: Space, query_id: str, candidate_ids: Sequence[str]) -> list[float]:
        """Cosine of the query against each candidate, in candidate order.

        float64 accumulation via einsum keeps the result independent of BLAS
        threading, which the determinism guarantee relies on.
        """
        query = self.vector(space, query_id).astype(np.float64)
        qnorm = math.sqrt(float(np.dot(query, query)))
        row_lookup = self._rows[space]
        try:
            rows = [row_lookup[cid] for cid in candidate_ids]
        except KeyError as exc:
            raise MissingEmbeddingError(
                f"no embedding for {exc.args[0]!r} in space {space.value!r}"
            ) from None
        if not rows:
            return []
        matrix = self._matrix[space][rows].astype(np.float64)
        norms = np.sqrt(np.einsum("nd,nd->n", matrix, matrix))
        dots = np.einsum("nd,d->n", matrix, query)
        return [min(1.0, max(-1.0, float(s))) for s in dots / (norms * qnorm)]


def _retrieve(
    index: VectorIndex,
    space: Space,
    modality: Modality,
    query_id: str,
    candidate_ids: Sequence[str],
    n: int,
) -> list[RankedCandidate]:
    scored = zip(candidate_ids, index.scores(space, query_id, candidate_ids))
    top = sorted(scored, key=lambda pair: (-pair[1], pair[0]))[:n]
    return [
        RankedCandidate(candidate_id=cid, modality=modality, initial_score=score, initial_rank=rank)
        for rank, (cid, score) in enumerate(top, start=1)
    ]


def retrieve_text(
    claim: Claim,
    index: VectorIndex,
    config: RetrievalConfig,
    candidate_ids: Collection[str] | None = None,
) -> list[RankedCandidate]:
    """Top-N sentences by cosine against the claim's text-space embedding."""
    ids = sorted(candidate_ids) if candidate_ids is not None else [
        i for i in index.ids(Space.TEXT) if i != claim.claim_id
    ]
    return _retrieve(index, Space.TEXT, Modality.TEXT, claim.claim_id, ids, config.n)


def retrieve_image(
    claim: Claim,
    index: VectorIndex,
    config: RetrievalConfig,
    candidate_ids: Collection[str] | None = None,
) -> list[RankedCandidate]:
    """Top-N images by cosine against the claim's crossmodal embedding."""
    ids = sorted(candidate_ids) if candidate_ids is not None else [
        i for i in index.ids(Space.CROSSMODAL) if i != claim.claim_id
    ]
    return _retrieve(index, Space.CROSSMODAL, Modality.IMAGE, claim.claim_id, ids, config.n)


def load_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    """Load line-delimited {"id", "space", "vector"} records."""
    records: list[EmbeddingRecord] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", path=str(path), line=lineno) from None
            try:
                records.append(
                    EmbeddingRecord(
                        id=str(obj["id"]),
                        space=Space(str(obj["space"])),
                        vector=np.asarray(obj["vector"], dtype=np.float32),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ParseError(f"bad embedding record: {exc}", path=str(path), line=lineno) from None
    return records


def save_embeddings_binary(
    records: Sequence[EmbeddingRecord], vectors_path: str | Path, manifest_path: str | Path
) -> None:
    """Write the binary sidecar: raw little-endian float32 rows plus an id manifest."""
    with open(vectors_path, "wb") as vec_handle, open(manifest_path, "w", encoding="utf-8") as man_handle:
        for rec in records:
            vec_handle.write(rec.vector.astype("<f4").tobytes())
            man_handle.write(
                json.dumps({"id": rec.id, "space": rec.space.value, "dim": int(rec.vector.size)}) + "\n"
            )


def load_embeddings_binary(vectors_path: str | Path, manifest_path: str | Path) -> list[EmbeddingRecord]:
    """Load the binary sidecar written by :func:`save_embeddings_binary`.

    Must agree bit-exactly with the JSON loader on the same data; both store
    float32.
    """
    records: list[EmbeddingRecord] = []
    raw = Path(vectors_path).read_bytes()
    offset = 0
    with open(manifest_path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                item_id = str(entry["id"])
                space = Space(str(entry["space"]))
                dim = int(entry["dim"])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ParseError(f"bad manifest record: {exc}", path=str(manifest_path), line=lineno) from None
            nbytes = 4 * dim
            if offset + nbytes > len(raw):
                raise ParseError(
                    f"vector file truncated: need {nbytes} bytes for {item_id!r}",
                    path=str(vectors_path),
                    line=lineno,
                )
            vector = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
            offset += nbytes
            records.append(EmbeddingRecord(id=item_id, space=space, vector=vector))
    if offset != len(raw):
        raise ParseError(f"vector file has {len(raw) - offset} trailing bytes", path=str(vectors_path))
    return records
