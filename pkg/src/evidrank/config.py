"""Pipeline configuration: one JSON file, env and flag overrides.

Relative paths are resolved against the config file's directory so fixture
bundles stay relocatable.  Flags win over file values; the oracle URL can also
come from ``EVIDRANK_ORACLE_URL``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .corpus import AnnotationLevel, VerdictLabel
from .errors import ConfigError
from .index import RetrievalConfig
from .errors import IntegrityError
from .oracle import TEMPLATES
from .rerank import RerankConfig, Strategy
from .verify import DEFAULT_TIE_PRIORITY, PairModality

ORACLE_URL_ENV = "EVIDRANK_ORACLE_URL"
ORACLE_KEY_ENV = "EVIDRANK_ORACLE_KEY"


@dataclass(frozen=True)
class PathsConfig:
    corpus: Path
    claims: Path
    embeddings: Path
    annotations: Path | None = None
    mock_script: Path | None = None


@dataclass(frozen=True)
class OracleConfig:
    url: str | None = None
    text_model: str = "text-oracle"
    vision_model: str = "vision-oracle"
    api_key_env: str = ORACLE_KEY_ENV
    max_inflight: int = 8
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    max_text_tokens: int = 2048
    max_image_tokens: int = 512
    chars_per_token: int = 4
    top_logprobs: int = 20
    mock_on_missing: str = "no"

    @property
    def text_char_budget(self) -> int:
        return self.max_text_tokens * self.chars_per_token

    @property
    def image_char_budget(self) -> int:
        return self.max_image_tokens * self.chars_per_token


@dataclass(frozen=True)
class VerifyConfig:
    modality: PairModality = PairModality.MULTIMODAL
    text_prompting: str = "one_level"
    multimodal_prompting: str = "two_level"
    one_level_template: str = "verdict-one-level"
    sufficiency_template: str = "verdict-sufficiency"
    stance_template: str = "verdict-stance"
    companion_images: int = 3
    companion_sentences: int = 3
    tie_priority: tuple[VerdictLabel, ...] = DEFAULT_TIE_PRIORITY


@dataclass(frozen=True)
class EvaluateConfig:
    annotation_levels: tuple[AnnotationLevel, ...] = (AnnotationLevel.OVERALL,)
    include_empty_gold: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    rerank: RerankConfig = field(default_factory=lambda: RerankConfig(strategy=Strategy.GAIS_YN))
    oracle: OracleConfig = field(default_factory=OracleConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    relevance_text_template: str = "text-related"
    relevance_image_template: str = "image-same-person"
    modalities: tuple[str, ...] = ("text", "image")
    out_dir: Path = Path("out")
    jobs: int = 1
    seed: int = 0  # reserved; the pipeline is fully deterministic today


def _section(raw: Mapping[str, Any], name: str) -> dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(value)


def _reject_unknown(section: dict[str, Any], known: set[str], where: str) -> None:
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a pipeline config file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    base = path.parent

    paths_raw = _section(raw, "paths")
    _reject_unknown(paths_raw, {"corpus", "claims", "embeddings", "annotations", "mock_script"}, "paths")
    for key in ("corpus", "claims", "embeddings"):
        if key not in paths_raw:
            raise ConfigError(f"paths.{key} is required")
    paths = PathsConfig(
        corpus=_resolve(base, paths_raw["corpus"]),
        claims=_resolve(base, paths_raw["claims"]),
        embeddings=_resolve(base, paths_raw["embeddings"]),
        annotations=_resolve(base, paths_raw["annotations"]) if paths_raw.get("annotations") else None,
        mock_script=_resolve(base, paths_raw["mock_script"]) if paths_raw.get("mock_script") else None,
    )

    retrieval_raw = _section(raw, "retrieval")
    _reject_unknown(retrieval_raw, {"n", "k_values", "k_evidence"}, "retrieval")
    try:
        retrieval = RetrievalConfig(
            n=int(retrieval_raw.get("n", 100)),
            k_values=tuple(int(k) for k in retrieval_raw.get("k_values", (1, 2, 5, 10))),
            k_evidence=int(retrieval_raw.get("k_evidence", 5)),
        )
    except IntegrityError as exc:
        raise ConfigError(str(exc)) from None

    rerank_raw = _section(raw, "rerank")
    _reject_unknown(rerank_raw, {"strategy", "lambda", "yn_mode", "yno_other_mode"}, "rerank")
    try:
        strategy = Strategy(str(rerank_raw.get("strategy", "gais_yn")).lower())
    except ValueError:
        raise ConfigError(f"unknown rerank strategy {rerank_raw.get('strategy')!r}") from None
    rerank = RerankConfig(
        strategy=strategy,
        lam=float(rerank_raw.get("lambda", 1e-4)),
        k_evidence=retrieval.k_evidence,
        yn_mode=str(rerank_raw.get("yn_mode", "renormalize")),
        yno_other_mode=str(rerank_raw.get("yno_other_mode", "excluded")),
    )

    oracle_raw = _section(raw, "oracle")
    _reject_unknown(
        oracle_raw,
        {
            "url", "text_model", "vision_model", "api_key_env", "max_inflight", "timeout",
            "max_attempts", "backoff_base", "max_text_tokens", "max_image_tokens", "chars_per_token",
            "top_logprobs", "mock_on_missing",
        },
        "oracle",
    )
    oracle = OracleConfig(
        url=os.environ.get(ORACLE_URL_ENV) or oracle_raw.get("url"),
        text_model=str(oracle_raw.get("text_model", "text-oracle")),
        vision_model=str(oracle_raw.get("vision_model", "vision-oracle")),
        api_key_env=str(oracle_raw.get("api_key_env", ORACLE_KEY_ENV)),
        max_inflight=int(oracle_raw.get("max_inflight", 8)),
        timeout=float(oracle_raw.get("timeout", 60.0)),
        max_attempts=int(oracle_raw.get("max_attempts", 3)),
        backoff_base=float(oracle_raw.get("backoff_base", 0.5)),
        max_text_tokens=int(oracle_raw.get("max_text_tokens", 2048)),
        max_image_tokens=int(oracle_raw.get("max_image_tokens", 512)),
        chars_per_token=int(oracle_raw.get("chars_per_token", 4)),
        top_logprobs=int(oracle_raw.get("top_logprobs", 20)),
        mock_on_missing=str(oracle_raw.get("mock_on_missing", "no")),
    )
    if oracle.mock_on_missing not in ("no", "error"):
        raise ConfigError(f"oracle.mock_on_missing must be 'no' or 'error', got {oracle.mock_on_missing!r}")

    verify_raw = _section(raw, "verify")
    _reject_unknown(
        verify_raw,
        {
            "modality", "text_prompting", "multimodal_prompting", "one_level_template",
            "sufficiency_template", "stance_template", "companion_images",
            "companion_sentences", "tie_priority",
        },
        "verify",
    )
    try:
        pair_modality = PairModality(str(verify_raw.get("modality", "multimodal")))
    except ValueError:
        raise ConfigError(f"unknown verify modality {verify_raw.get('modality')!r}") from None
    tie_priority = DEFAULT_TIE_PRIORITY
    if "tie_priority" in verify_raw:
        names = [str(v).lower() for v in verify_raw["tie_priority"]]
        by_key = {label.key: label for label in VerdictLabel}
        if sorted(names) != sorted(by_key):
            raise ConfigError(f"tie_priority must list all of {sorted(by_key)} once, got {names}")
        tie_priority = tuple(by_key[name] for name in names)
    verify = VerifyConfig(
        modality=pair_modality,
        text_prompting=str(verify_raw.get("text_prompting", "one_level")),
        multimodal_prompting=str(verify_raw.get("multimodal_prompting", "two_level")),
        one_level_template=str(verify_raw.get("one_level_template", "verdict-one-level")),
        sufficiency_template=str(verify_raw.get("sufficiency_template", "verdict-sufficiency")),
        stance_template=str(verify_raw.get("stance_template", "verdict-stance")),
        companion_images=int(verify_raw.get("companion_images", 3)),
        companion_sentences=int(verify_raw.get("companion_sentences", 3)),
        tie_priority=tie_priority,
    )
    for mode in (verify.text_prompting, verify.multimodal_prompting):
        if mode not in ("one_level", "two_level"):
            raise ConfigError(f"prompting mode must be 'one_level' or 'two_level', got {mode!r}")

    evaluate_raw = _section(raw, "evaluate")
    _reject_unknown(evaluate_raw, {"annotation_levels", "include_empty_gold"}, "evaluate")
    try:
        levels = tuple(
            AnnotationLevel(str(level)) for level in evaluate_raw.get("annotation_levels", ("overall",))
        )
    except ValueError:
        raise ConfigError(f"unknown annotation level in {evaluate_raw.get('annotation_levels')}") from None
    evaluate = EvaluateConfig(
        annotation_levels=levels,
        include_empty_gold=bool(evaluate_raw.get("include_empty_gold", False)),
    )

    relevance_text = str(raw.get("relevance_text_template", "text-related"))
    relevance_image = str(raw.get("relevance_image_template", "image-same-person"))
    for name in (
        relevance_text, relevance_image, verify.one_level_template,
        verify.sufficiency_template, verify.stance_template,
    ):
        if name not in TEMPLATES:
            raise ConfigError(f"unknown prompt template {name!r}")

    modalities = tuple(str(m) for m in raw.get("modalities", ("text", "image")))
    if not modalities or any(m not in ("text", "image") for m in modalities):
        raise ConfigError(f"modalities must be a non-empty subset of ['text', 'image'], got {modalities}")

    known_top = {
        "paths", "retrieval", "rerank", "oracle", "verify", "evaluate",
        "relevance_text_template", "relevance_image_template", "modalities",
        "out_dir", "jobs", "seed",
    }
    _reject_unknown(dict(raw), known_top, "config")

    jobs = int(raw.get("jobs", 1))
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")

    return PipelineConfig(
        paths=paths,
        retrieval=retrieval,
        rerank=rerank,
        oracle=oracle,
        verify=verify,
        evaluate=evaluate,
        relevance_text_template=relevance_text,
        relevance_image_template=relevance_image,
        modalities=modalities,
        out_dir=_resolve(base, str(raw.get("out_dir", "out"))),
        jobs=jobs,
        seed=int(raw.get("seed", 0)),
    )


def apply_overrides(
    config: PipelineConfig,
    *,
    strategy: str | None = None,
    k: int | None = None,
    lam: float | None = None,
    oracle_url: str | None = None,
    mock_script: str | None = None,
    out_dir: str | None = None,
    jobs: int | None = None,
) -> PipelineConfig:
    """Apply CLI flag overrides on top of the file values."""
    if strategy is not None:
        try:
            config = replace(config, rerank=replace(config.rerank, strategy=Strategy(strategy.lower())))
        except ValueError:
            raise ConfigError(f"unknown rerank strategy {strategy!r}") from None
    if k is not None:
        config = replace(
            config,
            retrieval=replace(config.retrieval, k_evidence=k),
            rerank=replace(config.rerank, k_evidence=k),
        )
    if lam is not None:
        config = replace(config, rerank=replace(config.rerank, lam=lam))
    if oracle_url is not None:
        config = replace(config, oracle=replace(config.oracle, url=oracle_url))
    if mock_script is not None:
        config = replace(config, paths=replace(config.paths, mock_script=Path(mock_script)))
    if out_dir is not None:
        config = replace(config, out_dir=Path(out_dir))
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("jobs must be >= 1")
        config = replace(config, jobs=jobs)
    return config
