from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import strategies as st

from lunguage.embed import DeterministicProvider, SimilarityEnsemble
from lunguage.model import (
    AttributeKind,
    DxCertainty,
    DxStatus,
    EntityCategory,
    EntityGroup,
    Finding,
    Member,
    PatientSequence,
    Relation,
    RelationKind,
    StructuredReport,
    TemporalGroup,
    validate_sequence,
)
from lunguage.score import LunguageScorer

FIXTURES = Path(__file__).parent / "fixtures"


def finding(fid="e1", text="opacity", status="positive", certainty="definitive", category="pf",
            sent_idx=1, relations=(), **attrs) -> Finding:
    return Finding(
        id=fid,
        entity_text=text,
        category=EntityCategory(category),
        dx_status=DxStatus(status),
        dx_certainty=DxCertainty(certainty),
        attributes={AttributeKind(k): tuple(v) for k, v in attrs.items()},
        relations=tuple(Relation(RelationKind(k), t) for k, t in relations),
        sent_idx=sent_idx,
    )


def report(*findings: Finding, study_id="s0", day=0) -> StructuredReport:
    return StructuredReport(study_id, day, tuple(findings))


@pytest.fixture(scope="session")
def ensemble():
    return SimilarityEnsemble([DeterministicProvider(seed=0, dim=256), DeterministicProvider(seed=1, dim=128)])


@pytest.fixture(scope="session")
def scorer(ensemble):
    return LunguageScorer(ensemble)


# ---------------------------------------------------------------------------
# hypothesis strategies
# ---------------------------------------------------------------------------

WORDS = ["opacity", "effusion", "pleural", "left", "right", "base", "lower", "lobe", "small", "moderate",
         "stable", "increased", "decreased", "tube", "edema", "mild", "new", "apical", "nodule", "line"]

text_st = st.lists(st.sampled_from(WORDS), min_size=1, max_size=3).map(" ".join)
attr_kinds = [k for k in AttributeKind if not k.is_binary]


@st.composite
def findings_st(draw, fid: str):
    kinds = draw(st.lists(st.sampled_from(attr_kinds), max_size=4, unique=True))
    attrs = {k.value: draw(st.lists(text_st, min_size=1, max_size=2)) for k in kinds}
    return finding(
        fid,
        draw(text_st),
        draw(st.sampled_from([s.value for s in DxStatus])),
        draw(st.sampled_from([c.value for c in DxCertainty])),
        draw(st.sampled_from([c.value for c in EntityCategory])),
        draw(st.integers(1, 5)),
        **attrs,
    )


@st.composite
def reports_st(draw, min_findings=0, max_findings=5, study_id="s0", day=0):
    n = draw(st.integers(min_findings, max_findings))
    fs = [draw(findings_st(f"e{i}")) for i in range(1, n + 1)]
    if n >= 2 and draw(st.booleans()):
        # an Evidence link always travels with an Associate link
        a, b = draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True))
        fs[a] = replace(fs[a], relations=(Relation(RelationKind.ASSOCIATE, fs[b].id),
                                          Relation(RelationKind.EVIDENCE, fs[b].id)))
    return StructuredReport(study_id, day, tuple(fs))


@st.composite
def sequences_st(draw, max_studies=3, max_findings=4, min_findings=0):
    t = draw(st.integers(1, max_studies))
    gaps = draw(st.lists(st.integers(1, 60), min_size=t - 1, max_size=t - 1))
    days = [0]
    for g in gaps:
        days.append(days[-1] + g)
    reports = [draw(reports_st(min_findings, max_findings, f"s{i}", d)) for i, d in enumerate(days)]
    # group findings by entity text; each group is split into episodes at a random study
    by_text: dict[str, list[Member]] = {}
    for i, r in enumerate(reports):
        for f in r.findings:
            by_text.setdefault(f.entity_text, []).append(Member(i, f.id))
    groups = []
    for g_i, (name, members) in enumerate(by_text.items(), start=1):
        studies = sorted({m.study_idx for m in members})
        cut = draw(st.integers(1, len(studies)))
        eps = [tuple(studies[:cut])] + ([tuple(studies[cut:])] if studies[cut:] else [])
        groups.append(EntityGroup(f"g{g_i}", name, tuple(members),
                                  tuple(TemporalGroup(k, e) for k, e in enumerate(eps, start=1))))
    return validate_sequence(PatientSequence("p0", tuple(reports), tuple(groups)))
