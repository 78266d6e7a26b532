"""Re-ranking of the initial candidate pool from oracle answers.

Four strategies:

* ``irs``      - keep the cosine ordering but lift every oracle-approved
                 candidate above every other one.
* ``gais_all`` - score from the full-softmax probability of the generated
                 token.
* ``gais_yn``  - score from the yes/no class masses renormalized against each
                 other.
* ``gais_yno`` - score from the three-way yes/no/other masses, deciding
                 between yes and no only.

The three score-based variants share one rule: an approving answer scores its
yes-probability, a rejecting answer scores lambda * (1 - no-probability) with
lambda small enough that every rejected candidate stays below every approved
one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .corpus import Modality
from .errors import ConfigError, ContractError, DegenerateResponseError
from .index import RankedCandidate
from .oracle import OracleResponse, TokenClassName


class Strategy(str, enum.Enum):
    IRS = "irs"
    GAIS_ALL = "gais_all"
    GAIS_YN = "gais_yn"
    GAIS_YNO = "gais_yno"


YN_MODE_RENORMALIZE = "renormalize"
YN_MODE_SOFTMAX = "softmax"

YNO_OTHER_EXCLUDED = "excluded"
YNO_OTHER_RANK_LAST = "rank_last"

# Largest lambda that still keeps every no-answer score (at most lambda/2 under
# gais_yn, where the winning no-mass is >= 0.5) below every yes-answer score
# (> 0.5).
MAX_LAMBDA = 0.01

FLAG_TREATED_AS_NO = "unrecognized-answer-as-no"
FLAG_OTHER_DOMINANT = "other-dominant"
FLAG_ORACLE_ERROR = "oracle-error"


@dataclass(frozen=True, slots=True)
class RerankConfig:
    strategy: Strategy
    lam: float = 1e-4
    k_evidence: int = 5
    yn_mode: str = YN_MODE_RENORMALIZE
    yno_other_mode: str = YNO_OTHER_EXCLUDED

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= MAX_LAMBDA:
            raise ConfigError(f"lambda must be in (0, {MAX_LAMBDA}], got {self.lam}")
        if self.yn_mode not in (YN_MODE_RENORMALIZE, YN_MODE_SOFTMAX):
            raise ConfigError(f"unknown yn_mode {self.yn_mode!r}")
        if self.yno_other_mode not in (YNO_OTHER_EXCLUDED, YNO_OTHER_RANK_LAST):
            raise ConfigError(f"unknown yno_other_mode {self.yno_other_mode!r}")
        if self.k_evidence < 1:
            raise ConfigError("k_evidence must be >= 1")


@dataclass(frozen=True, slots=True)
class RerankedCandidate:
    candidate_id: str
    modality: Modality
    initial_score: float
    initial_rank: int
    oracle_class: TokenClassName
    relevance_score: float
    final_rank: int
    flags: tuple[str, ...] = ()


class ClassifiedAnswer(NamedTuple):
    answer: TokenClassName  # YES or NO
    probability: float      # the p fed into the scoring rule
    flags: tuple[str, ...] = ()


def relevance_score(answer: TokenClassName, probability: float, lam: float) -> float:
    """Final candidate score from a yes/no answer and its extracted probability."""
    if answer is TokenClassName.YES:
        return probability
    if answer is TokenClassName.NO:
        return lam * (1.0 - probability)
    raise ContractError(f"relevance_score takes YES or NO, got {answer.value}")


def classify_gais_all(resp: OracleResponse) -> ClassifiedAnswer:
    """Answer and probability under full-dictionary softmax scoring.

    The probability is the full-softmax mass of the generated token itself.
    A generated token outside both classes is treated as a rejection backed by
    the NO class mass, and flagged.
    """
    if resp.generated_class is TokenClassName.YES:
        return ClassifiedAnswer(TokenClassName.YES, resp.generated_token_prob)
    if resp.generated_class is TokenClassName.NO:
        return ClassifiedAnswer(TokenClassName.NO, resp.generated_token_prob)
    return ClassifiedAnswer(TokenClassName.NO, resp.mass(TokenClassName.NO), (FLAG_TREATED_AS_NO,))


def classify_gais_yn(resp: OracleResponse, mode: str = YN_MODE_RENORMALIZE) -> ClassifiedAnswer:
    """Answer and probability from the yes/no class masses alone.

    The two masses are normalized against each other (default) or pushed
    through a literal softmax; the larger class wins and its normalized
    probability is the extracted score.  Exact ties go to NO.
    """
    yes = resp.mass(TokenClassName.YES)
    no = resp.mass(TokenClassName.NO)
    if yes + no <= 0.0:
        raise DegenerateResponseError("yes and no classes both have zero mass")
    if mode == YN_MODE_SOFTMAX:
        ey, en = math.exp(yes), math.exp(no)
        p_yes = ey / (ey + en)
    else:
        p_yes = yes / (yes + no)
    if p_yes > 0.5:
        return ClassifiedAnswer(TokenClassName.YES, p_yes)
    return ClassifiedAnswer(TokenClassName.NO, 1.0 - p_yes)


def classify_gais_yno(resp: OracleResponse, other_mode: str = YNO_OTHER_EXCLUDED) -> ClassifiedAnswer:
    """Answer and probability from three-way yes/no/other masses.

    The residual mass (everything outside yes and no) forms the third class;
    the decision still compares yes against no only.  The winner's three-way
    mass is the extracted probability, so heavy residual mass deflates both.
    """
    yes = resp.mass(TokenClassName.YES)
    no = resp.mass(TokenClassName.NO)
    other = max(0.0, 1.0 - yes - no)
    flags: tuple[str, ...] = ()
    if other_mode == YNO_OTHER_RANK_LAST and other > max(yes, no):
        flags = (FLAG_OTHER_DOMINANT,)
    if yes > no:
        return ClassifiedAnswer(TokenClassName.YES, yes, flags)
    return ClassifiedAnswer(TokenClassName.NO, no, flags)


_CLASSIFIERS = {
    Strategy.GAIS_ALL: lambda resp, cfg: classify_gais_all(resp),
    Strategy.GAIS_YN: lambda resp, cfg: classify_gais_yn(resp, cfg.yn_mode),
    Strategy.GAIS_YNO: lambda resp, cfg: classify_gais_yno(resp, cfg.yno_other_mode),
}


def _irs_class(resp: OracleResponse) -> TokenClassName:
    if resp.generated_class in (TokenClassName.YES, TokenClassName.NO):
        return resp.generated_class
    return TokenClassName.OTHER


def rerank_irs(
    candidates: Sequence[RankedCandidate], responses: Sequence[OracleResponse | None]
) -> list[RerankedCandidate]:
    """Approved candidates first, initial cosine order within each block.

    Candidates whose oracle call failed terminally stay in the output but are
    flagged and ranked below both answer blocks.
    """
    keyed = []
    for cand, resp in zip(candidates, responses, strict=True):
        if resp is None:
            block, oracle_class, flags = 2, TokenClassName.OTHER, (FLAG_ORACLE_ERROR,)
        else:
            oracle_class = _irs_class(resp)
            block, flags = (0 if oracle_class is TokenClassName.YES else 1), ()
        keyed.append((block, -cand.initial_score, cand.candidate_id, cand, oracle_class, flags))
    keyed.sort(key=lambda item: item[:3])
    return [
        RerankedCandidate(
            candidate_id=cand.candidate_id,
            modality=cand.modality,
            initial_score=cand.initial_score,
            initial_rank=cand.initial_rank,
            oracle_class=oracle_class,
            relevance_score=cand.initial_score,
            final_rank=rank,
            flags=flags,
        )
        for rank, (_, _, _, cand, oracle_class, flags) in enumerate(keyed, start=1)
    ]


def rerank_gais(
    candidates: Sequence[RankedCandidate],
    responses: Sequence[OracleResponse | None],
    config: RerankConfig,
) -> list[RerankedCandidate]:
    """Score every candidate and sort by score, cosine, id.

    A missing or degenerate response does not drop the candidate: it is kept
    with a zero score, flagged, and sunk below everything that scored.
    """
    if config.strategy not in _CLASSIFIERS:
        raise ContractError(f"rerank_gais does not handle strategy {config.strategy.value}")
    classify = _CLASSIFIERS[config.strategy]
    keyed = []
    for cand, resp in zip(candidates, responses, strict=True):
        failed = False
        flags: tuple[str, ...] = ()
        if resp is None:
            failed = True
            oracle_class = TokenClassName.OTHER
            score = 0.0
            flags = (FLAG_ORACLE_ERROR,)
        else:
            try:
                answer, probability, flags = classify(resp, config)
                sink = FLAG_OTHER_DOMINANT in flags
                score = 0.0 if sink else relevance_score(answer, probability, config.lam)
                failed = sink
                oracle_class = answer
            except DegenerateResponseError:
                failed = True
                oracle_class = TokenClassName.OTHER
                score = 0.0
                flags = (FLAG_ORACLE_ERROR,)
        keyed.append((failed, -score, -cand.initial_score, cand.candidate_id, cand, oracle_class, score, flags))
    keyed.sort(key=lambda item: item[:4])
    return [
        RerankedCandidate(
            candidate_id=cand.candidate_id,
            modality=cand.modality,
            initial_score=cand.initial_score,
            initial_rank=cand.initial_rank,
            oracle_class=oracle_class,
            relevance_score=score,
            final_rank=rank,
            flags=flags,
        )
        for rank, (_, _, _, _, cand, oracle_class, score, flags) in enumerate(keyed, start=1)
    ]


def rerank(
    candidates: Sequence[RankedCandidate],
    responses: Sequence[OracleResponse | None],
    config: RerankConfig,
) -> list[RerankedCandidate]:
    """Dispatch to the configured strategy; output is a permutation of the input."""
    if config.strategy is Strategy.IRS:
        return rerank_irs(candidates, responses)
    return rerank_gais(candidates, responses, config)


def top_evidence(reranked: Sequence[RerankedCandidate], k_evidence: int) -> list[RerankedCandidate]:
    """The final evidence slice handed to verification."""
    return list(reranked[:k_evidence])
