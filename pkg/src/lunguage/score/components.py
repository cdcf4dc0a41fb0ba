"""Pairwise similarity components: semantic, temporal and structural.

Scalar functions score one pair; the ``*_matrix`` functions score every
predicted/gold pair at once and are what the scorer uses.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import UngroupedFinding
from ..model import BINARY_KINDS, FREE_TEXT_KINDS, AttributeKind, EntityGroup, Finding
from .weights import AttributeWeights, TemporalWeights

K = AttributeKind

# attributes that enter the linearized phrase, in phrase order
PHRASE_KINDS = (
    K.LOCATION,
    K.MORPHOLOGY,
    K.DISTRIBUTION,
    K.MEASUREMENT,
    K.SEVERITY,
    K.ONSET,
    K.IMPROVED,
    K.WORSENED,
    K.NO_CHANGE,
    K.PLACEMENT,
)


def linearize_single(f: Finding) -> str:
    """Entity text followed by its descriptive attribute values."""
    parts = [f.entity_text.strip()]
    for kind in PHRASE_KINDS:
        values = f.attributes.get(kind)
        if values:
            parts.append(", ".join(v.strip() for v in values))
    return " ".join(p for p in parts if p)


def attribute_text(f: Finding, kind: AttributeKind) -> str:
    return ", ".join(f.attributes.get(kind, ()))


def _representation(item, mode: str, groups: dict | None = None, lenient: bool = False) -> str:
    if isinstance(item, EntityGroup):
        return item.group_name
    if mode == "single":
        return linearize_single(item)
    group = (groups or {}).get(item.id)
    if group is None:
        if lenient:
            return linearize_single(item)
        raise UngroupedFinding(f"finding {item.id!r} belongs to no entity group")
    return group.group_name


def semantic_score(ensemble, a: Finding | EntityGroup, b: Finding | EntityGroup, mode: str = "single",
                   groups_a: dict | None = None, groups_b: dict | None = None, lenient: bool = False) -> float:
    """Similarity of the two findings' text representations.

    In single mode findings are linearized; in sequential mode each finding
    is represented by its entity group name (``groups_*`` map finding id to
    group, or pass :class:`EntityGroup` objects directly).
    """
    if mode not in ("single", "sequential"):
        raise ValueError(f"mode must be 'single' or 'sequential', got {mode!r}")
    ra = _representation(a, mode, groups_a, lenient)
    rb = _representation(b, mode, groups_b, lenient)
    return ensemble.similarity(ra, rb)


def temporal_score(weights: TemporalWeights | None, pred: tuple[int, int | None], gold: tuple[int, int | None]) -> float:
    """Weighted agreement of ``(study_idx, episode_ordinal)`` positions."""
    w = weights or TemporalWeights()
    same_study = pred[0] == gold[0]
    same_episode = pred[1] is not None and pred[1] == gold[1]
    return w.study * same_study + w.group * same_episode


def temporal_matrix(weights: TemporalWeights | None, pred_pos: Sequence, gold_pos: Sequence) -> np.ndarray:
    w = weights or TemporalWeights()
    ps = np.array([p[0] for p in pred_pos], dtype=int)
    gs = np.array([g[0] for g in gold_pos], dtype=int)
    pe = np.array([-1 if p[1] is None else p[1] for p in pred_pos], dtype=int)
    ge = np.array([-2 if g[1] is None else g[1] for g in gold_pos], dtype=int)
    same_study = ps[:, None] == gs[None, :]
    same_ep = pe[:, None] == ge[None, :]
    return w.study * same_study + w.group * same_ep


def structural_matrix(weights: AttributeWeights | None, ensemble, preds: Sequence[Finding],
                      golds: Sequence[Finding]) -> np.ndarray:
    """Weighted attribute agreement, normalized by the weights compared.

    An attribute enters the comparison when either finding carries it;
    DxStatus and DxCertainty always do. Binary kinds score exact equality,
    free-text kinds the ensemble similarity of the comma-joined values (0
    when one side lacks the attribute).
    """
    w = weights or AttributeWeights.default()
    n, m = len(preds), len(golds)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    num = np.zeros((n, m))
    den = np.zeros((n, m))
    for kind in BINARY_KINDS:
        pv = np.array([f.values(kind)[0] for f in preds], dtype=object)
        gv = np.array([f.values(kind)[0] for f in golds], dtype=object)
        num += w[kind] * (pv[:, None] == gv[None, :])
        den += w[kind]
    for kind in FREE_TEXT_KINDS:
        pv = [attribute_text(f, kind) for f in preds]
        gv = [attribute_text(f, kind) for f in golds]
        present = np.array([bool(v) for v in pv], dtype=bool)[:, None] | np.array([bool(v) for v in gv], dtype=bool)[None, :]
        if not present.any():
            continue
        sim = ensemble.pairwise(pv, gv)
        num += w[kind] * sim * present
        den += w[kind] * present
    return num / den


def structural_score(weights: AttributeWeights | None, ensemble, pred: Finding, gold: Finding) -> float:
    return float(structural_matrix(weights, ensemble, [pred], [gold])[0, 0])


def structural_breakdown(weights: AttributeWeights | None, ensemble, pred: Finding, gold: Finding) -> dict:
    """Per-attribute ``{kind: (similarity, weight)}`` for the compared kinds."""
    w = weights or AttributeWeights.default()
    out = {}
    for kind in BINARY_KINDS:
        out[kind.value] = (float(pred.values(kind) == gold.values(kind)), w[kind])
    for kind in FREE_TEXT_KINDS:
        a, b = attribute_text(pred, kind), attribute_text(gold, kind)
        if a or b:
            out[kind.value] = (ensemble.similarity(a, b), w[kind])
    return out


def match_score(semantic: float, structural: float, temporal: float | None = None) -> float:
    """Product of the components; the temporal factor only in sequential mode."""
    if temporal is None:
        return semantic * structural
    return semantic * temporal * structural
