"""Finding-level scoring of structured reports and patient sequences."""

from .assignment import assign, matching_value
from .components import (
    PHRASE_KINDS,
    linearize_single,
    match_score,
    semantic_score,
    structural_breakdown,
    structural_matrix,
    structural_score,
    temporal_matrix,
    temporal_score,
)
from .metric import (
    LunguageScorer,
    MatchedPair,
    MatchMatrix,
    ScoreBreakdown,
    aggregate,
    f1_score,
    micro_average,
    score_sequence,
    score_single,
    sequence_matrix,
    single_matrix,
)
from .weights import DEFAULT_ATTRIBUTE_WEIGHTS, AttributeWeights, TemporalWeights

__all__ = [
    "assign",
    "matching_value",
    "PHRASE_KINDS",
    "linearize_single",
    "match_score",
    "semantic_score",
    "structural_breakdown",
    "structural_matrix",
    "structural_score",
    "temporal_matrix",
    "temporal_score",
    "LunguageScorer",
    "MatchedPair",
    "MatchMatrix",
    "ScoreBreakdown",
    "aggregate",
    "f1_score",
    "micro_average",
    "score_sequence",
    "score_single",
    "sequence_matrix",
    "single_matrix",
    "DEFAULT_ATTRIBUTE_WEIGHTS",
    "AttributeWeights",
    "TemporalWeights",
]
