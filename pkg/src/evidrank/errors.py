"""Exception taxonomy and process exit codes.

Every failure the pipeline can surface maps onto one of these classes so the
CLI can translate it into a stable exit code.
"""

from __future__ import annotations


class EvidrankError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EvidrankError):
    """Invalid or inconsistent configuration."""


class ParseError(EvidrankError):
    """A record file could not be parsed."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


class IntegrityError(EvidrankError):
    """Well-formed input that violates a data invariant (duplicate ids, bad vectors, ...)."""


class LabelMappingError(EvidrankError):
    """A raw label string has no defined mapping."""


class MissingEmbeddingError(EvidrankError):
    """An id has no embedding in the requested space."""


class TransportError(EvidrankError):
    """The oracle endpoint could not be reached after the configured retries."""


class ProtocolError(EvidrankError):
    """The oracle endpoint answered, but not in the expected shape."""


class DegenerateResponseError(EvidrankError):
    """An oracle response carries no usable class probability mass."""


class ContractError(EvidrankError):
    """A caller violated an internal precondition; this is a bug, not an input problem."""


class EvaluationError(EvidrankError):
    """Metrics could not be computed (e.g. no eligible claims)."""


EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_ORACLE = 4
EXIT_EVALUATION = 5

_EXIT_BY_TYPE: tuple[tuple[type[EvidrankError], int], ...] = (
    (ConfigError, EXIT_CONFIG),
    (ParseError, EXIT_INTEGRITY),
    (IntegrityError, EXIT_INTEGRITY),
    (LabelMappingError, EXIT_INTEGRITY),
    (MissingEmbeddingError, EXIT_INTEGRITY),
    (TransportError, EXIT_ORACLE),
    (ProtocolError, EXIT_ORACLE),
    (DegenerateResponseError, EXIT_ORACLE),
    (EvaluationError, EXIT_EVALUATION),
)


def exit_code_for(exc: BaseException) -> int:
    """Stable exit code for an exception (1 for anything unclassified)."""
    for etype, code in _EXIT_BY_TYPE:
        if isinstance(exc, etype):
            return code
    return 1
