"""Controlled perturbations of structured sequences and the sensitivity
harness that rescores them."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Mapping, Sequence

from .model import (
    AttributeKind,
    DxCertainty,
    DxStatus,
    EntityCategory,
    EntityGroup,
    Finding,
    Member,
    PatientSequence,
    TemporalGroup,
    validate_sequence,
)

logger = logging.getLogger(__name__)

K = AttributeKind


def load_antonyms() -> dict[str, str]:
    text = resources.files("lunguage").joinpath("data", "antonyms.json").read_text(encoding="utf-8")
    return json.loads(text)


DEFAULT_ANTONYMS = load_antonyms()

_WORD = re.compile(r"[A-Za-z]+")


def flip_text(text: str, antonyms: Mapping[str, str] | None = None) -> str:
    """Replace each mapped word by its antonym, keeping leading capitals."""
    table = DEFAULT_ANTONYMS if antonyms is None else antonyms

    def sub(m):
        word = m.group()
        rep = table.get(word.lower())
        if rep is None:
            return word
        return rep[:1].upper() + rep[1:] if word[:1].isupper() else rep

    return _WORD.sub(sub, text)


def _with_attributes(f: Finding, attrs: dict) -> Finding:
    return replace(f, attributes={k: tuple(v) for k, v in attrs.items() if v})


def flip_finding(f: Finding, antonyms: Mapping[str, str] | None = None) -> tuple[Finding, int]:
    improved = f.attributes.get(K.IMPROVED, ())
    worsened = f.attributes.get(K.WORSENED, ())
    count = len(improved) + len(worsened)
    if not count:
        return f, 0
    attrs = dict(f.attributes)
    attrs[K.WORSENED] = tuple(flip_text(v, antonyms) for v in improved)
    attrs[K.IMPROVED] = tuple(flip_text(v, antonyms) for v in worsened)
    return _with_attributes(f, attrs), count


def flip_temporal_attributes(seq: PatientSequence, antonyms: Mapping[str, str] | None = None
                             ) -> tuple[PatientSequence, int]:
    """Swap every Improved value into Worsened and back, rewording with antonyms.

    Returns the perturbed sequence and the number of values moved. A
    sequence without such values is returned unchanged with a notice.
    """
    total = 0
    reports = []
    for r in seq.reports:
        findings = []
        for f in r.findings:
            nf, n = flip_finding(f, antonyms)
            total += n
            findings.append(nf)
        reports.append(replace(r, findings=tuple(findings)))
    if total == 0:
        logger.info("patient %s has no improved/worsened values; skipping", seq.patient_id)
        return seq, 0
    return validate_sequence(replace(seq, reports=tuple(reports))), total


# ---------------------------------------------------------------------------
# other injectors
# ---------------------------------------------------------------------------

class PerturbationKind(str, Enum):
    FLIP_IMPROVED_WORSENED = "flip-temporal"
    DELETE_FINDING = "delete-finding"
    INSERT_FINDING = "insert-finding"
    EDIT_ATTRIBUTE = "edit-attribute"
    NEGATE_STATUS = "negate-status"
    CHANGE_SEVERITY = "change-severity"


@dataclass(frozen=True)
class Perturbation:
    """One perturbation.

    ``target`` is a ``(study_idx, finding_id)`` pair; when None a finding is
    drawn with ``random.Random(seed)``. ``payload`` carries kind-specific
    arguments (see :func:`apply_perturbation`).
    """

    kind: PerturbationKind
    target: tuple[int, str] | None = None
    payload: Mapping = field(default_factory=dict)
    seed: int = 0


def _pick(seq: PatientSequence, p: Perturbation) -> tuple[int, str] | None:
    if p.target is not None:
        t, fid = p.target
        seq.reports[t].finding(fid)
        return t, fid
    pool = [(t, f.id) for t, f in seq.iter_findings()]
    return random.Random(p.seed).choice(pool) if pool else None


def _replace_finding(seq: PatientSequence, t: int, fid: str, new: Finding | None) -> PatientSequence:
    r = seq.reports[t]
    findings = tuple(new if f.id == fid else f for f in r.findings if f.id != fid or new is not None)
    reports = list(seq.reports)
    reports[t] = replace(r, findings=findings)
    return replace(seq, reports=tuple(reports))


def _drop_member(groups: Sequence[EntityGroup], t: int, fid: str) -> tuple[EntityGroup, ...]:
    out = []
    for g in groups:
        members = tuple(m for m in g.members if m != (t, fid))
        if not members:
            continue
        if len(members) != len(g.members):
            studies = {m.study_idx for m in members}
            eps = [tuple(s for s in e.member_study_idxs if s in studies) for e in g.episodes]
            eps = [e for e in eps if e]
            g = replace(g, members=members,
                        episodes=tuple(TemporalGroup(i, e) for i, e in enumerate(eps, start=1)))
        out.append(g)
    return tuple(out)


def _delete(seq, t, fid, payload):
    f = seq.reports[t].finding(fid)
    seq = _replace_finding(seq, t, fid, None)
    reports = list(seq.reports)
    reports[t] = replace(reports[t], findings=tuple(
        replace(x, relations=tuple(r for r in x.relations if r.target_id != f.id)) for x in reports[t].findings
    ))
    return replace(seq, reports=tuple(reports), entity_groups=_drop_member(seq.entity_groups, t, fid)), 1


def _insert(seq, t, fid, payload):
    r = seq.reports[t]
    taken = {f.id for f in r.findings}
    n = 1
    while f"ins{n}" in taken:
        n += 1
    new = Finding(
        id=f"ins{n}",
        entity_text=payload.get("entity_text", "nodule"),
        category=EntityCategory(payload.get("category", "pf")),
        dx_status=DxStatus(payload.get("dx_status", "positive")),
        dx_certainty=DxCertainty(payload.get("dx_certainty", "definitive")),
        attributes={K(k): tuple(v) for k, v in payload.get("attributes", {}).items()},
        sent_idx=max((f.sent_idx for f in r.findings), default=0) + 1,
    )
    reports = list(seq.reports)
    reports[t] = replace(r, findings=r.findings + (new,))
    existing = {g.group_id for g in seq.entity_groups}
    gid = f"g_ins{n}"
    while gid in existing:
        gid += "_"
    group = EntityGroup(gid, payload.get("group_name", new.entity_text), (Member(t, new.id),),
                        (TemporalGroup(1, (t,)),))
    return replace(seq, reports=tuple(reports), entity_groups=seq.entity_groups + (group,)), 1


def _edit(seq, t, fid, payload):
    f = seq.reports[t].finding(fid)
    kind = K(payload.get("kind", K.LOCATION.value))
    if kind.is_binary:
        raise ValueError("use negate-status for diagnostic fields")
    attrs = dict(f.attributes)
    attrs[kind] = tuple(payload.get("values", ("unspecified",)))
    return _replace_finding(seq, t, fid, _with_attributes(f, attrs)), 1


def _negate(seq, t, fid, payload):
    f = seq.reports[t].finding(fid)
    flipped = DxStatus.NEGATIVE if f.dx_status is DxStatus.POSITIVE else DxStatus.POSITIVE
    return _replace_finding(seq, t, fid, replace(f, dx_status=flipped)), 1


SEVERITY_LEVELS = ("mild", "moderate", "severe", "small", "large", "trace")


def _severity(seq, t, fid, payload, seed=0):
    f = seq.reports[t].finding(fid)
    current = f.attributes.get(K.SEVERITY, ())
    new = payload.get("severity")
    if new is None:
        choices = [s for s in SEVERITY_LEVELS if s not in current]
        new = random.Random(seed).choice(choices)
    attrs = dict(f.attributes)
    attrs[K.SEVERITY] = (new,)
    return _replace_finding(seq, t, fid, _with_attributes(f, attrs)), 1


def apply_perturbation(seq: PatientSequence, p: Perturbation,
                       antonyms: Mapping[str, str] | None = None) -> tuple[PatientSequence, int]:
    """Apply ``p`` and return the re-validated sequence and edit count.

    Payload keys: insert-finding takes ``entity_text``, ``category``,
    ``dx_status``, ``dx_certainty``, ``attributes`` and ``group_name``;
    edit-attribute takes ``kind`` and ``values``; change-severity takes
    ``severity``.
    """
    kind = PerturbationKind(p.kind)
    if kind is PerturbationKind.FLIP_IMPROVED_WORSENED:
        return flip_temporal_attributes(seq, antonyms)
    target = _pick(seq, p)
    if target is None:
        logger.info("patient %s has no findings to perturb; skipping", seq.patient_id)
        return seq, 0
    t, fid = target
    payload = dict(p.payload)
    if kind is PerturbationKind.DELETE_FINDING:
        out, n = _delete(seq, t, fid, payload)
    elif kind is PerturbationKind.INSERT_FINDING:
        out, n = _insert(seq, t, fid, payload)
    elif kind is PerturbationKind.EDIT_ATTRIBUTE:
        out, n = _edit(seq, t, fid, payload)
    elif kind is PerturbationKind.NEGATE_STATUS:
        out, n = _negate(seq, t, fid, payload)
    else:
        out, n = _severity(seq, t, fid, payload, p.seed)
    return validate_sequence(out), n


# ---------------------------------------------------------------------------
# sensitivity harness
# ---------------------------------------------------------------------------

def effect_rate(score: float, flips: int) -> float | None:
    """Percent score loss per flipped attribute; None when nothing flipped."""
    if flips <= 0:
        return None
    return (1.0 - score) / flips * 100.0


@dataclass(frozen=True)
class SensitivityCase:
    patient_id: str
    kind: str
    flips: int
    single_score: float
    single_effect_rate: float | None
    seq_score: float
    seq_effect_rate: float | None


@dataclass
class SensitivityReport:
    cases: list[SensitivityCase]
    skipped: list[str]

    CSV_COLUMNS = ("patient_id", "flips", "single_score", "single_effect_rate", "seq_score", "seq_effect_rate")

    def summary(self) -> dict:
        out = {}
        for col in self.CSV_COLUMNS[1:]:
            vals = [getattr(c, col) for c in self.cases if getattr(c, col) is not None]
            out[col] = (
                {"mean": math.fsum(vals) / len(vals), "min": min(vals), "max": max(vals)} if vals else None
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for c in self.cases:
            w.writerow([
                c.patient_id, c.flips, f"{c.single_score:.6f}", _fmt(c.single_effect_rate),
                f"{c.seq_score:.6f}", _fmt(c.seq_effect_rate),
            ])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def run_sensitivity(scorer, cases: Sequence[tuple[PatientSequence, Perturbation]],
                    antonyms: Mapping[str, str] | None = None, n_jobs: int = 1) -> SensitivityReport:
    """Perturb each gold sequence and score it against the original.

    The single-report score compares aligned studies one by one
    (micro-averaged); the sequential score compares the whole sequence.
    Cases whose perturbation changes nothing are skipped with a notice.
    """

    def one(case):
        gold, p = case
        perturbed, n = apply_perturbation(gold, p, antonyms)
        if n == 0:
            return None
        single = scorer.score_sequence_per_study(perturbed, gold).f1
        seq = scorer.score_sequence(perturbed, gold).f1
        return SensitivityCase(gold.patient_id, PerturbationKind(p.kind).value, n, single,
                               effect_rate(single, n), seq, effect_rate(seq, n))

    items = list(cases)
    if n_jobs == 1:
        results = [one(c) for c in items]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs if n_jobs > 0 else None) as pool:
            results = list(pool.map(one, items))
    report = SensitivityReport([], [])
    for (gold, _), res in zip(items, results):
        if res is None:
            report.skipped.append(gold.patient_id)
        else:
            report.cases.append(res)
    if report.skipped:
        logger.warning("skipped %d case(s) with nothing to perturb: %s", len(report.skipped),
                       ", ".join(report.skipped))
    return report
