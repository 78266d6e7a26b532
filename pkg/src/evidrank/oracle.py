"""Gateway to generative relevance/verdict oracles.

Builds class-constrained prompts, talks to an OpenAI-compatible chat
completions endpoint (one generated token, with per-token probabilities), and
normalizes what comes back into per-class probability masses.  A scriptable
in-process mock stands in for the remote model in tests and offline runs.

This module never ranks anything; it only reports masses.  All ranking math
lives downstream.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .corpus import Claim, ImageRef, Sentence
from .errors import (
    DegenerateResponseError,
    IntegrityError,
    ParseError,
    ProtocolError,
    TransportError,
)

log = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-6


class TokenClassName(str, enum.Enum):
    YES = "yes"
    NO = "no"
    NONE = "none"
    OTHER = "other"


NAMED_CLASSES = (TokenClassName.YES, TokenClassName.NO, TokenClassName.NONE)


@dataclass(frozen=True, slots=True)
class TokenClass:
    """A named answer class and the detokenized strings that count as it."""

    name: TokenClassName
    surface_forms: frozenset[str]


def _variants(word: str) -> frozenset[str]:
    forms = {word, word.capitalize(), word.upper()}
    return frozenset(forms | {" " + f for f in forms})


DEFAULT_TOKEN_CLASSES: tuple[TokenClass, ...] = (
    TokenClass(TokenClassName.YES, _variants("yes")),
    TokenClass(TokenClassName.NO, _variants("no")),
    TokenClass(TokenClassName.NONE, _variants("none")),
)


class TokenClassifier:
    """Maps generated token strings onto answer classes.

    Matching is leading/trailing-whitespace- and case-insensitive; anything
    unmatched is the residual OTHER class.
    """

    def __init__(self, classes: Iterable[TokenClass] = DEFAULT_TOKEN_CLASSES):
        self._by_form: dict[str, TokenClassName] = {}
        for cls in classes:
            if cls.name is TokenClassName.OTHER and cls.surface_forms:
                raise IntegrityError("OTHER is the residual class and takes no surface forms")
            for form in cls.surface_forms:
                normalized = self._normalize(form)
                existing = self._by_form.get(normalized)
                if existing is not None and existing is not cls.name:
                    raise IntegrityError(f"surface form {form!r} is claimed by {existing.value} and {cls.name.value}")
                self._by_form[normalized] = cls.name

    @staticmethod
    def _normalize(token: str) -> str:
        return token.strip().casefold()

    def classify(self, token: str) -> TokenClassName:
        return self._by_form.get(self._normalize(token), TokenClassName.OTHER)


@dataclass(frozen=True, slots=True)
class OracleResponse:
    """First-token answer with full-softmax probability bookkeeping.

    ``class_mass`` sums the reported token probabilities over each named
    class's surface forms; OTHER carries the residual so the four masses total
    one.  ``generated_token_prob`` is the probability of the literally
    generated token.
    """

    generated_class: TokenClassName
    class_mass: Mapping[TokenClassName, float]
    generated_token_prob: float

    def mass(self, name: TokenClassName) -> float:
        return float(self.class_mass.get(name, 0.0))


def validate_response(resp: OracleResponse) -> OracleResponse:
    named = 0.0
    for name in NAMED_CLASSES:
        value = resp.mass(name)
        if not 0.0 <= value <= 1.0:
            raise IntegrityError(f"class mass {name.value}={value} outside [0, 1]")
        named += value
    if named > 1.0 + MASS_TOLERANCE:
        raise IntegrityError(f"named class masses sum to {named} > 1")
    other = resp.mass(TokenClassName.OTHER)
    if abs(other - max(0.0, 1.0 - named)) > MASS_TOLERANCE:
        raise IntegrityError(f"OTHER mass {other} is not the residual of {named}")
    if not 0.0 < resp.generated_token_prob <= 1.0:
        raise IntegrityError(f"generated token probability {resp.generated_token_prob} outside (0, 1]")
    return resp


def make_response(
    generated_class: TokenClassName | str,
    *,
    yes: float = 0.0,
    no: float = 0.0,
    none: float = 0.0,
    generated_token_prob: float | None = None,
) -> OracleResponse:
    """Build a valid response, filling the OTHER residual automatically."""
    cls = TokenClassName(generated_class)
    mass = {
        TokenClassName.YES: yes,
        TokenClassName.NO: no,
        TokenClassName.NONE: none,
        TokenClassName.OTHER: max(0.0, 1.0 - yes - no - none),
    }
    if generated_token_prob is None:
        generated_token_prob = max(mass.get(cls, 0.0), 1e-9)
    return validate_response(OracleResponse(cls, mass, generated_token_prob))


class PromptLayout(str, enum.Enum):
    TEXT_PAIR = "text_pair"
    IMAGE_QUERY = "image_query"


@dataclass(frozen=True, slots=True)
class PromptTemplate:
    name: str
    instruction: str
    layout: PromptLayout
    answer_classes: tuple[TokenClassName, ...] = (TokenClassName.YES, TokenClassName.NO)

    def __post_init__(self) -> None:
        if not self.instruction:
            raise IntegrityError(f"template {self.name!r} has an empty instruction")


@dataclass(frozen=True, slots=True)
class RenderedPrompt:
    text: str
    image_uris: tuple[str, ...] = ()


def _truncate(text: str, char_budget: int | None) -> str:
    if char_budget is not None and len(text) > char_budget:
        return text[:char_budget]
    return text


def render_text_pair(template: PromptTemplate, query: str, corpus_text: str) -> str:
    return f"{template.instruction}\n### Query: {query}\n### corpus: {corpus_text}\n### Answer:"


def render_image_query(template: PromptTemplate, query: str) -> str:
    return f"{template.instruction}\n### Query: {query}"


def build_relevance_prompt(
    template: PromptTemplate,
    claim: Claim,
    candidate: Sentence | ImageRef,
    char_budget: int | None = None,
) -> RenderedPrompt:
    """Render a relevance prompt for one claim/candidate pair.

    The template layout must match the candidate's modality; claim and
    candidate text are cut to the character budget before rendering.
    """
    query = _truncate(claim.text, char_budget)
    if template.layout is PromptLayout.TEXT_PAIR:
        if not isinstance(candidate, Sentence):
            raise IntegrityError(f"template {template.name!r} expects a sentence candidate")
        return RenderedPrompt(render_text_pair(template, query, _truncate(candidate.text, char_budget)))
    if not isinstance(candidate, ImageRef):
        raise IntegrityError(f"template {template.name!r} expects an image candidate")
    return RenderedPrompt(render_image_query(template, query), image_uris=(candidate.uri,))


# Relevance templates; the two *-related/-same-person ones performed best and
# are the defaults.
TEMPLATES: dict[str, PromptTemplate] = {
    t.name: t
    for t in (
        PromptTemplate(
            "text-related",
            "Is this corpus related to the query? Answer with yes or no.",
            PromptLayout.TEXT_PAIR,
        ),
        PromptTemplate(
            "text-same-person",
            "Is query and corpus mentioning the same person or topic? Answer with yes or no.",
            PromptLayout.TEXT_PAIR,
        ),
        PromptTemplate(
            "text-evidence",
            "Is this corpus an evidence for the query? Answer with yes or no.",
            PromptLayout.TEXT_PAIR,
        ),
        PromptTemplate(
            "image-describe",
            "Does this query describe the image?",
            PromptLayout.IMAGE_QUERY,
        ),
        PromptTemplate(
            "image-related",
            "Based on the query below, is it related to the image?",
            PromptLayout.IMAGE_QUERY,
        ),
        PromptTemplate(
            "image-same-person",
            "Is this image and text query mentioning the same person or topic?",
            PromptLayout.IMAGE_QUERY,
        ),
        PromptTemplate(
            "verdict-one-level",
            "Does the corpus support the query claim? Answer with yes if it supports it, "
            "no if it refutes it, or none if it does not provide enough information.",
            PromptLayout.TEXT_PAIR,
            (TokenClassName.YES, TokenClassName.NO, TokenClassName.NONE),
        ),
        PromptTemplate(
            "verdict-sufficiency",
            "Is the corpus enough to support or refute the query claim? Answer with yes or no.",
            PromptLayout.TEXT_PAIR,
        ),
        PromptTemplate(
            "verdict-stance",
            "Does the corpus support the query claim? Answer with yes or no.",
            PromptLayout.TEXT_PAIR,
        ),
    )
}


def get_template(name: str) -> PromptTemplate:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise IntegrityError(f"unknown prompt template {name!r}") from None


# Stages name which question a request is asking, so scripted mocks can key on
# them; the ids say which pair the question is about.
STAGE_RELEVANCE = "relevance"
STAGE_ONE_LEVEL = "one_level"
STAGE_SUFFICIENCY = "sufficiency"
STAGE_STANCE = "stance"


@dataclass(frozen=True, slots=True)
class OracleRequest:
    prompt: RenderedPrompt
    claim_id: str
    candidate_id: str
    stage: str = STAGE_RELEVANCE
    model: str | None = None

    @property
    def fingerprint(self) -> tuple[str, str, str]:
        return (self.claim_id, self.candidate_id, self.stage)


class Oracle:
    """Base interface: one request in, one validated response out."""

    def ask(self, request: OracleRequest) -> OracleResponse:
        raise NotImplementedError

    def ask_many(self, requests: Sequence[OracleRequest]) -> list[OracleResponse]:
        """Answers in request order, regardless of completion order."""
        return [self.ask(request) for request in requests]


def response_from_token_probs(
    token: str,
    top_token_probs: Mapping[str, float],
    generated_token_prob: float,
    classifier: TokenClassifier,
) -> OracleResponse:
    """Turn a server's first-token report into a class-mass response.

    ``top_token_probs`` maps each reported token string to its full-softmax
    probability; each named class collects the mass of its surface forms and
    OTHER absorbs the rest of the distribution.
    """
    mass = {name: 0.0 for name in NAMED_CLASSES}
    for form, prob in top_token_probs.items():
        cls = classifier.classify(form)
        if cls is not TokenClassName.OTHER:
            mass[cls] += prob
    named = sum(mass.values())
    generated_class = classifier.classify(token)
    if generated_class is TokenClassName.OTHER and named <= 0.0:
        raise DegenerateResponseError(
            f"generated token {token!r} matches no class and no class has probability mass"
        )
    mass_full: dict[TokenClassName, float] = dict(mass)
    mass_full[TokenClassName.OTHER] = max(0.0, 1.0 - named)
    # Clamp into (0, 1]: servers occasionally report logprobs that underflow
    # or round past the valid range.
    prob = min(1.0, max(generated_token_prob, 1e-300))
    return validate_response(OracleResponse(generated_class, mass_full, prob))


@dataclass(frozen=True)
class HttpOracleConfig:
    base_url: str
    model: str
    api_key_env: str = "EVIDRANK_ORACLE_KEY"
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    top_logprobs: int = 20
    max_inflight: int = 8


class HttpOracle(Oracle):
    """OpenAI-compatible chat completions client.

    Sends one-token requests with per-token probabilities enabled and retries
    transient transport failures with exponential backoff.  Concurrency is
    bounded; responses are always matched back to requests by index.
    """

    def __init__(
        self,
        config: HttpOracleConfig,
        classifier: TokenClassifier | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._config = config
        self._classifier = classifier or TokenClassifier()
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(config.max_inflight)

    def _payload(self, request: OracleRequest) -> dict[str, Any]:
        prompt = request.prompt
        content: Any = prompt.text
        if prompt.image_uris:
            content = [{"type": "text", "text": prompt.text}] + [
                {"type": "image_url", "image_url": {"url": uri}} for uri in prompt.image_uris
            ]
        return {
            "model": request.model or self._config.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": True,
            "top_logprobs": self._config.top_logprobs,
        }

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self._config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        url = self._config.base_url.rstrip("/") + "/chat/completions"
        last_error: Exception | None = None
        for attempt in range(1, self._config.max_attempts + 1):
            try:
                response = self._client.post(url, json=payload, headers=self._headers())
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code < 400:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise ProtocolError(f"endpoint returned non-JSON body: {exc}") from None
                if response.status_code not in (429,) and response.status_code < 500:
                    raise ProtocolError(f"endpoint rejected request: HTTP {response.status_code}")
                last_error = TransportError(f"HTTP {response.status_code}")
            if attempt < self._config.max_attempts:
                self._sleep(self._config.backoff_base * 2 ** (attempt - 1))
        raise TransportError(
            f"oracle endpoint failed after {self._config.max_attempts} attempts: {last_error}"
        )

    @staticmethod
    def _first_token(data: dict[str, Any]) -> tuple[str, float, dict[str, float]]:
        try:
            entry = data["choices"][0]["logprobs"]["content"][0]
            token = str(entry["token"])
            token_prob = math.exp(float(entry["logprob"]))
            top = {str(alt["token"]): math.exp(float(alt["logprob"])) for alt in entry["top_logprobs"]}
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"response missing token probability data: {exc!r}") from None
        return token, token_prob, top

    def ask(self, request: OracleRequest) -> OracleResponse:
        with self._semaphore:
            started = time.monotonic()
            data = self._post(self._payload(request))
            elapsed = time.monotonic() - started
        token, token_prob, top = self._first_token(data)
        log.debug(
            "oracle stage=%s claim=%s candidate=%s token=%r elapsed=%.3fs",
            request.stage, request.claim_id, request.candidate_id, token, elapsed,
        )
        return response_from_token_probs(token, top, token_prob, self._classifier)

    def ask_many(self, requests: Sequence[OracleRequest]) -> list[OracleResponse]:
        if not requests:
            return []
        with ThreadPoolExecutor(max_workers=self._config.max_inflight) as pool:
            return list(pool.map(self.ask, requests))


class MockOracle(Oracle):
    """Deterministic in-process oracle driven by a (claim, candidate, stage) script."""

    DEFAULT_NO = make_response(TokenClassName.NO, no=1.0)

    def __init__(
        self,
        script: Mapping[tuple[str, str, str], OracleResponse],
        on_missing: str = "no",
    ):
        if on_missing not in ("no", "error"):
            raise IntegrityError(f"on_missing must be 'no' or 'error', got {on_missing!r}")
        self._script = {key: validate_response(resp) for key, resp in script.items()}
        self._on_missing = on_missing

    def ask(self, request: OracleRequest) -> OracleResponse:
        response = self._script.get(request.fingerprint)
        if response is None:
            if self._on_missing == "error":
                raise ProtocolError(f"mock oracle has no scripted response for {request.fingerprint}")
            return self.DEFAULT_NO
        return response

    @classmethod
    def from_file(cls, path: str | Path, on_missing: str = "no") -> "MockOracle":
        """Load line-delimited scripted responses.

        Each record: {"claim_id", "candidate_id", "class", "class_mass": {...},
        "generated_token_prob"} plus an optional "stage" (default "relevance").
        """
        script: dict[tuple[str, str, str], OracleResponse] = {}
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"malformed JSON: {exc.msg}", path=str(path), line=lineno) from None
                try:
                    masses = {str(k): float(v) for k, v in obj.get("class_mass", {}).items()}
                    response = make_response(
                        str(obj["class"]),
                        yes=masses.get("yes", 0.0),
                        no=masses.get("no", 0.0),
                        none=masses.get("none", 0.0),
                        generated_token_prob=float(obj["generated_token_prob"]),
                    )
                    key = (
                        str(obj["claim_id"]),
                        str(obj["candidate_id"]),
                        str(obj.get("stage", STAGE_RELEVANCE)),
                    )
                except (KeyError, ValueError, IntegrityError) as exc:
                    raise ParseError(f"bad scripted response: {exc}", path=str(path), line=lineno) from None
                script[key] = response
        return cls(script, on_missing=on_missing)
