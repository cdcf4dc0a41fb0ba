"""Structured chest X-ray reports: schema, structuring pipeline and a
finding-level scoring metric for single reports and patient sequences."""

from importlib import metadata as _metadata

from .embed import (
    CachedProvider,
    DeterministicProvider,
    HttpEmbeddingProvider,
    PairTableProvider,
    SimilarityEnsemble,
    make_deterministic_provider,
    make_fixture_provider,
)
from .errors import LunguageError, ProviderUnavailable, ScoringError, ValidationError
from .model import (
    EntityGroup,
    Finding,
    PatientSequence,
    StructuredReport,
    TemporalGroup,
    load_corpus,
    parse_report,
    parse_sequence,
)
from .score import AttributeWeights, LunguageScorer, ScoreBreakdown, TemporalWeights, score_sequence, score_single
from .vocab import SpanMatcher, Vocabulary, load_vocabulary, match_spans

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # pragma: no cover - source checkout
    __version__ = "0.0.0"

__all__ = [
    "CachedProvider",
    "DeterministicProvider",
    "HttpEmbeddingProvider",
    "PairTableProvider",
    "SimilarityEnsemble",
    "make_deterministic_provider",
    "make_fixture_provider",
    "LunguageError",
    "ProviderUnavailable",
    "ScoringError",
    "ValidationError",
    "EntityGroup",
    "Finding",
    "PatientSequence",
    "StructuredReport",
    "TemporalGroup",
    "load_corpus",
    "parse_report",
    "parse_sequence",
    "AttributeWeights",
    "LunguageScorer",
    "ScoreBreakdown",
    "TemporalWeights",
    "score_sequence",
    "score_single",
    "SpanMatcher",
    "Vocabulary",
    "load_vocabulary",
    "match_spans",
    "__version__",
]
