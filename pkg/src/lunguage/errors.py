"""Exception hierarchy.

Validation problems carry a machine-readable ``code`` (the class name) and a
JSON-pointer-ish ``path`` so callers can report where a document went wrong.
"""

from __future__ import annotations


class LunguageError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(LunguageError, ValueError):
    """A document failed schema validation."""

    def __init__(self, message: str, path: str = "", **context):
        self.message = message
        self.path = path
        self.context = context
        super().__init__(f"{path}: {message}" if path else message)

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        out = {"code": self.code, "path": self.path, "message": self.message}
        out.update({k: v for k, v in self.context.items() if v is not None})
        return out


class MalformedJson(ValidationError):
    pass


class SchemaError(ValidationError):
    """Missing field, wrong type or out-of-range value."""


class UnknownCategory(ValidationError):
    pass


class UnknownAttributeKind(ValidationError):
    pass


class UnknownSection(ValidationError):
    pass


class DuplicateFindingId(ValidationError):
    pass


class DanglingRelationTarget(ValidationError):
    def __init__(self, target_id: str, path: str = "", finding_id: str | None = None):
        self.target_id = target_id
        super().__init__(
            f"relation target {target_id!r} does not exist",
            path,
            finding_id=finding_id,
            target_id=target_id,
        )


class EvidenceWithoutAssociate(ValidationError):
    pass


class UnorderedStudies(ValidationError):
    pass


class OverlappingEpisodes(ValidationError):
    pass


class MemberNotFound(ValidationError):
    pass


class DuplicateGroupMember(ValidationError):
    pass


class InvalidEpisodes(ValidationError):
    """Episodes do not partition a group's members or are misnumbered."""


class CorpusError(LunguageError):
    """One or more lines of a corpus failed validation.

    ``errors`` is a list of ``(line_number, ValidationError)`` tuples,
    line numbers 1-based.
    """

    def __init__(self, source: str, errors: list[tuple[int, ValidationError]]):
        self.source = source
        self.errors = errors
        lines = ", ".join(str(n) for n, _ in errors[:10])
        first = errors[0][1] if errors else None
        super().__init__(f"{source}: {len(errors)} invalid line(s) [{lines}]; first: {first}")


# embedding / completion backends

class ProviderUnavailable(LunguageError):
    """A remote backend could not be reached or kept failing."""


class DimensionMismatch(LunguageError):
    pass


# scoring

class ScoringError(LunguageError, ValueError):
    pass


class UngroupedFinding(ScoringError):
    pass


class SequenceLengthMismatch(ScoringError):
    pass


class AssignmentMatrixMismatch(ScoringError):
    pass


# structuring

class EmptyReport(LunguageError, ValueError):
    pass


class UncoveredFinding(ValidationError):
    pass


class DuplicatedFinding(ValidationError):
    pass


class ValidationExhausted(LunguageError):
    """The completion provider never produced a valid document.

    ``last_error`` is the final validation error; ``transcript`` holds every
    exchange (prompt, raw response, error).
    """

    def __init__(self, last_error: Exception, transcript: list):
        self.last_error = last_error
        self.transcript = transcript
        raw = transcript[-1].response if transcript else ""
        super().__init__(
            f"no valid output after {len(transcript)} attempt(s): "
            f"{type(last_error).__name__}: {last_error}; last raw output: {raw[:500]!r}"
        )
