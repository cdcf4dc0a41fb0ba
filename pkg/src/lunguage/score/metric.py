"""Match matrices, partial-credit aggregation and the scorer estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ..embed import SimilarityEnsemble, ensemble_from_env
from ..errors import AssignmentMatrixMismatch, SequenceLengthMismatch, UngroupedFinding
from ..model import Finding, PatientSequence, StructuredReport
from ..validation import check_report, check_score_matrix, check_sequence
from .assignment import assign
from .components import linearize_single, structural_matrix, temporal_matrix
from .weights import AttributeWeights, TemporalWeights


@dataclass
class MatchMatrix:
    """Pairwise scores between predicted rows and gold columns.

    ``temporal`` is None in single-report mode. ``scores`` is the cellwise
    product of the components.
    """

    pred_ids: list[str]
    gold_ids: list[str]
    semantic: np.ndarray
    structural: np.ndarray
    temporal: np.ndarray | None = None

    def __post_init__(self):
        shape = (len(self.pred_ids), len(self.gold_ids))
        self.semantic = np.asarray(self.semantic, dtype=float).reshape(shape)
        self.structural = np.asarray(self.structural, dtype=float).reshape(shape)
        if self.temporal is not None:
            self.temporal = np.asarray(self.temporal, dtype=float).reshape(shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape

    @property
    def scores(self) -> np.ndarray:
        if self.temporal is None:
            return self.semantic * self.structural
        return self.semantic * self.temporal * self.structural

    def components(self, i: int, j: int) -> dict:
        return {
            "semantic": float(self.semantic[i, j]),
            "temporal": None if self.temporal is None else float(self.temporal[i, j]),
            "structural": float(self.structural[i, j]),
        }

    @classmethod
    def from_components(cls, semantic, structural, temporal=None, pred_ids=None, gold_ids=None) -> "MatchMatrix":
        """Build a matrix from precomputed component values."""
        semantic = np.atleast_2d(np.asarray(semantic, dtype=float))
        n, m = semantic.shape
        pred_ids = list(pred_ids) if pred_ids is not None else [f"p{i}" for i in range(n)]
        gold_ids = list(gold_ids) if gold_ids is not None else [f"g{j}" for j in range(m)]
        return cls(pred_ids, gold_ids, semantic, structural, temporal)


@dataclass(frozen=True)
class MatchedPair:
    pred: str
    gold: str
    score: float
    semantic: float
    temporal: float | None
    structural: float


@dataclass(frozen=True)
class ScoreBreakdown:
    tp: float
    fp: float
    fn: float
    matched: tuple[MatchedPair, ...] = ()
    unmatched_pred: tuple[str, ...] = ()
    unmatched_gold: tuple[str, ...] = ()

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matched": [
                {"pred": p.pred, "gold": p.gold, "score": p.score, "semantic": p.semantic,
                 "temporal": p.temporal, "structural": p.structural}
                for p in self.matched
            ],
            "unmatched_pred": list(self.unmatched_pred),
            "unmatched_gold": list(self.unmatched_gold),
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2 * precision * recall / s if s > 0 else 0.0


def aggregate(matrix: MatchMatrix | np.ndarray, pairs: Sequence[tuple[int, int]]) -> ScoreBreakdown:
    """Partial-credit TP/FP/FN for a matching.

    Each matched pair adds its score to TP and its complement to both FP
    and FN. An unmatched prediction adds one minus its best score against
    any gold finding (matched or not) to FP; unmatched gold findings are
    charged to FN the same way.
    """
    if not isinstance(matrix, MatchMatrix):
        s = check_score_matrix(matrix)
        n, m = s.shape
        matrix = MatchMatrix([str(i) for i in range(n)], [str(j) for j in range(m)], s, np.ones_like(s))
    s = matrix.scores
    n, m = s.shape
    seen_r, seen_c = set(), set()
    for r, c in pairs:
        if not (0 <= r < n and 0 <= c < m):
            raise AssignmentMatrixMismatch(f"pair ({r}, {c}) outside a {n}x{m} matrix")
        if r in seen_r or c in seen_c:
            raise AssignmentMatrixMismatch(f"pair ({r}, {c}) reuses a row or column")
        seen_r.add(r)
        seen_c.add(c)

    matched_s = [float(s[r, c]) for r, c in pairs]
    un_r = [i for i in range(n) if i not in seen_r]
    un_c = [j for j in range(m) if j not in seen_c]
    row_max = s.max(axis=1) if m else np.zeros(n)
    col_max = s.max(axis=0) if n else np.zeros(m)
    tp = math.fsum(matched_s)
    miss = [1.0 - v for v in matched_s]
    fp = math.fsum(miss + [1.0 - float(row_max[i]) for i in un_r])
    fn = math.fsum(miss + [1.0 - float(col_max[j]) for j in un_c])

    pred_ids, gold_ids = matrix.pred_ids, matrix.gold_ids
    detail = [MatchedPair(pred_ids[r], gold_ids[c], float(s[r, c]), **matrix.components(r, c)) for r, c in pairs]
    return ScoreBreakdown(
        tp, fp, fn, tuple(detail), tuple(pred_ids[i] for i in un_r), tuple(gold_ids[j] for j in un_c)
    )


def micro_average(breakdowns: Iterable[ScoreBreakdown]) -> ScoreBreakdown:
    """Pool TP/FP/FN over cases; pair lists are dropped."""
    items = list(breakdowns)
    return ScoreBreakdown(
        math.fsum(b.tp for b in items), math.fsum(b.fp for b in items), math.fsum(b.fn for b in items)
    )


# ---------------------------------------------------------------------------
# matrix construction
# ---------------------------------------------------------------------------

def single_matrix(pred: StructuredReport, gold: StructuredReport, ensemble, weights=None) -> MatchMatrix:
    pf, gf = list(pred.findings), list(gold.findings)
    semantic = ensemble.pairwise([linearize_single(f) for f in pf], [linearize_single(f) for f in gf])
    structural = structural_matrix(weights, ensemble, pf, gf)
    return MatchMatrix([f.id for f in pf], [f.id for f in gf], semantic, structural)


def _pooled(seq: PatientSequence, side: str, lenient: bool):
    lookup = seq.group_lookup()
    findings: list[Finding] = []
    ids, texts, positions = [], [], []
    for t, f in seq.iter_findings():
        hit = lookup.get((t, f.id))
        if hit is None:
            if not lenient:
                raise UngroupedFinding(f"{side} finding {f.id!r} in study {t} belongs to no entity group")
            texts.append(linearize_single(f))
            positions.append((t, None))
        else:
            group, ordinal = hit
            texts.append(group.group_name)
            positions.append((t, ordinal))
        findings.append(f)
        ids.append(f"{seq.reports[t].study_id}/{f.id}")
    return findings, ids, texts, positions


def sequence_matrix(pred: PatientSequence, gold: PatientSequence, ensemble, weights=None,
                    temporal_weights=None, lenient: bool = False) -> MatchMatrix:
    if pred.n_studies != gold.n_studies:
        raise SequenceLengthMismatch(
            f"prediction has {pred.n_studies} studies, reference has {gold.n_studies}"
        )
    pf, pids, ptexts, ppos = _pooled(pred, "predicted", lenient)
    gf, gids, gtexts, gpos = _pooled(gold, "reference", lenient)
    semantic = ensemble.pairwise(ptexts, gtexts)
    temporal = temporal_matrix(temporal_weights, ppos, gpos)
    structural = structural_matrix(weights, ensemble, pf, gf)
    return MatchMatrix(pids, gids, semantic, structural, temporal)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class LunguageScorer(BaseEstimator):
    """Fine-grained finding-level scorer for reports and patient sequences.

    Parameters
    ----------
    similarity : SimilarityEnsemble or EmbeddingProvider, optional
        Text similarity backend; a single provider is wrapped. When omitted, one is built from the
        ``LUNGUAGE_EMBED_*`` environment variables.
    attribute_weights : AttributeWeights or mapping, optional
        Structural weights; a mapping overrides the defaults per kind.
    temporal_weights : TemporalWeights, optional
    match_threshold : float
        Pairs scoring at or below this value never match.
    lenient_grouping : bool
        In sequential mode, score ungrouped findings on their linearized
        phrase with no episode instead of raising.
    """

    def __init__(self, similarity: SimilarityEnsemble | None = None, attribute_weights=None,
                 temporal_weights: TemporalWeights | None = None, match_threshold: float = 0.0,
                 lenient_grouping: bool = False):
        self.similarity = similarity
        self.attribute_weights = attribute_weights
        self.temporal_weights = temporal_weights
        self.match_threshold = match_threshold
        self.lenient_grouping = lenient_grouping

    def _ensemble(self) -> SimilarityEnsemble:
        if self.similarity is not None:
            if not isinstance(self.similarity, SimilarityEnsemble):
                # a lone provider is an ensemble of one
                self.similarity = SimilarityEnsemble([self.similarity])
            return self.similarity
        ens = ensemble_from_env()
        if ens is None:
            raise ValueError("no similarity backend: pass similarity= or set LUNGUAGE_EMBED_URL")
        self.similarity = ens
        return ens

    def _weights(self) -> AttributeWeights:
        w = self.attribute_weights
        if w is None:
            return AttributeWeights.default()
        if isinstance(w, AttributeWeights):
            return w
        return AttributeWeights.from_overrides(w)

    def fit(self, X=None, y=None):
        """No-op; present for pipeline compatibility."""
        self._ensemble()
        return self

    def single_matrix(self, pred, gold) -> MatchMatrix:
        return single_matrix(check_report(pred), check_report(gold), self._ensemble(), self._weights())

    def sequence_matrix(self, pred, gold) -> MatchMatrix:
        return sequence_matrix(check_sequence(pred), check_sequence(gold), self._ensemble(), self._weights(),
                               self.temporal_weights, self.lenient_grouping)

    def score_matrix(self, matrix: MatchMatrix) -> ScoreBreakdown:
        return aggregate(matrix, assign(matrix.scores, self.match_threshold))

    def score_single(self, pred, gold) -> ScoreBreakdown:
        return self.score_matrix(self.single_matrix(pred, gold))

    def score_sequence(self, pred, gold) -> ScoreBreakdown:
        return self.score_matrix(self.sequence_matrix(pred, gold))

    def score_sequence_per_study(self, pred, gold) -> ScoreBreakdown:
        """Single-report scores of aligned studies, micro-averaged."""
        pred, gold = check_sequence(pred), check_sequence(gold)
        if pred.n_studies != gold.n_studies:
            raise SequenceLengthMismatch(
                f"prediction has {pred.n_studies} studies, reference has {gold.n_studies}"
            )
        return micro_average(self.score_single(p, g) for p, g in zip(pred.reports, gold.reports))

    def score(self, pred, gold, mode: str = "sequential") -> float:
        """F1 of one prediction against its reference."""
        if mode == "single":
            return self.score_single(pred, gold).f1
        if mode == "sequential":
            return self.score_sequence(pred, gold).f1
        raise ValueError(f"mode must be 'single' or 'sequential', got {mode!r}")


def score_single(pred, gold, scorer: LunguageScorer | None = None, **params) -> ScoreBreakdown:
    return (scorer or LunguageScorer(**params)).score_single(pred, gold)


def score_sequence(pred, gold, scorer: LunguageScorer | None = None, **params) -> ScoreBreakdown:
    return (scorer or LunguageScorer(**params)).score_sequence(pred, gold)
