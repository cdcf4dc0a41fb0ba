"""Data model for single and sequential structured chest X-ray reports.

A :class:`StructuredReport` holds the findings of one study; a
:class:`PatientSequence` orders a patient's reports chronologically and
links findings across studies through :class:`EntityGroup` objects, each
split into :class:`TemporalGroup` episodes.

All objects are frozen after construction. Build them from JSON with
:func:`parse_report` / :func:`parse_sequence` (which run every check) or
directly from Python and call :func:`validate_report` /
:func:`validate_sequence`.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping, NamedTuple

from .errors import (
    CorpusError,
    DanglingRelationTarget,
    DuplicateFindingId,
    DuplicateGroupMember,
    EvidenceWithoutAssociate,
    InvalidEpisodes,
    MalformedJson,
    MemberNotFound,
    OverlappingEpisodes,
    SchemaError,
    UnknownAttributeKind,
    UnknownCategory,
    UnknownSection,
    UnorderedStudies,
    ValidationError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "EntityCategory",
    "AttributeKind",
    "DxStatus",
    "DxCertainty",
    "Section",
    "RelationKind",
    "Relation",
    "Finding",
    "StructuredReport",
    "Member",
    "TemporalGroup",
    "EntityGroup",
    "PatientSequence",
    "parse_report",
    "parse_sequence",
    "report_from_dict",
    "sequence_from_dict",
    "report_to_dict",
    "sequence_to_dict",
    "dumps",
    "validate_report",
    "validate_sequence",
    "load_corpus",
    "iter_corpus",
]


class EntityCategory(str, Enum):
    PF = "pf"
    CF = "cf"
    OTH = "oth"
    COF = "cof"
    NCD = "ncd"
    PATIENT_INFO = "patient_info"


class AttributeKind(str, Enum):
    """Scored attribute kinds; the value is the JSON key."""

    DX_STATUS = "dx_status"
    DX_CERTAINTY = "dx_certainty"
    LOCATION = "location"
    SEVERITY = "severity"
    ONSET = "onset"
    IMPROVED = "improved"
    WORSENED = "worsened"
    PLACEMENT = "placement"
    NO_CHANGE = "no_change"
    MORPHOLOGY = "morphology"
    DISTRIBUTION = "distribution"
    MEASUREMENT = "measurement"
    COMPARISON = "comparison"
    PAST_HX = "past_hx"
    OTHER_SOURCE = "other_source"
    ASSESSMENT_LIMITATIONS = "assessment_limitations"

    @property
    def is_binary(self) -> bool:
        return self in (AttributeKind.DX_STATUS, AttributeKind.DX_CERTAINTY)


BINARY_KINDS = (AttributeKind.DX_STATUS, AttributeKind.DX_CERTAINTY)
FREE_TEXT_KINDS = tuple(k for k in AttributeKind if not k.is_binary)


class DxStatus(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class DxCertainty(str, Enum):
    DEFINITIVE = "definitive"
    TENTATIVE = "tentative"


class Section(str, Enum):
    HISTORY = "history"
    FINDINGS = "findings"
    IMPRESSION = "impression"


class RelationKind(str, Enum):
    ASSOCIATE = "associate"
    EVIDENCE = "evidence"


class Relation(NamedTuple):
    kind: RelationKind
    target_id: str


@dataclass(frozen=True)
class Finding:
    id: str
    entity_text: str
    category: EntityCategory
    dx_status: DxStatus
    dx_certainty: DxCertainty
    attributes: Mapping[AttributeKind, tuple[str, ...]] = field(default_factory=dict)
    relations: tuple[Relation, ...] = ()
    sent_idx: int = 1
    section: Section = Section.FINDINGS

    def values(self, kind: AttributeKind) -> tuple[str, ...]:
        """Attribute values of ``kind`` (binary kinds included), empty if absent."""
        if kind is AttributeKind.DX_STATUS:
            return (self.dx_status.value,)
        if kind is AttributeKind.DX_CERTAINTY:
            return (self.dx_certainty.value,)
        return tuple(self.attributes.get(kind, ()))


@dataclass(frozen=True)
class StructuredReport:
    study_id: str
    study_day: int
    findings: tuple[Finding, ...] = ()
    source_text: Mapping[str, str] | None = None

    def finding(self, finding_id: str) -> Finding:
        for f in self.findings:
            if f.id == finding_id:
                return f
        raise KeyError(finding_id)

    def __len__(self) -> int:
        return len(self.findings)


class Member(NamedTuple):
    study_idx: int
    finding_id: str


@dataclass(frozen=True)
class TemporalGroup:
    episode_ordinal: int
    member_study_idxs: tuple[int, ...]


@dataclass(frozen=True)
class EntityGroup:
    group_id: str
    group_name: str
    members: tuple[Member, ...]
    episodes: tuple[TemporalGroup, ...]

    def episode_of(self, study_idx: int) -> int | None:
        for ep in self.episodes:
            if study_idx in ep.member_study_idxs:
                return ep.episode_ordinal
        return None


@dataclass(frozen=True)
class PatientSequence:
    patient_id: str
    reports: tuple[StructuredReport, ...]
    entity_groups: tuple[EntityGroup, ...] = ()

    @property
    def n_studies(self) -> int:
        return len(self.reports)

    def iter_findings(self) -> Iterator[tuple[int, Finding]]:
        """Yield ``(study_idx, finding)`` in chronological order."""
        for t, report in enumerate(self.reports):
            for f in report.findings:
                yield t, f

    def group_lookup(self) -> dict[tuple[int, str], tuple[EntityGroup, int]]:
        """Map ``(study_idx, finding_id)`` to ``(group, episode_ordinal)``."""
        out = {}
        for g in self.entity_groups:
            for m in g.members:
                out[(m.study_idx, m.finding_id)] = (g, g.episode_of(m.study_idx))
        return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _type_name(t) -> str:
    if isinstance(t, tuple):
        return " or ".join(x.__name__ for x in t)
    return t.__name__


def _get(obj: Mapping, key: str, typ, path: str, *, required: bool = True, default=None):
    if key not in obj or obj[key] is None:
        if required:
            raise SchemaError(f"missing required field {key!r}", path)
        return default
    value = obj[key]
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(value, bool) and typ in (int, float, (int, float)):
        raise SchemaError(f"field {key!r} must be {_type_name(typ)}, got bool", f"{path}/{key}")
    if not isinstance(value, typ):
        raise SchemaError(
            f"field {key!r} must be {_type_name(typ)}, got {type(value).__name__}", f"{path}/{key}"
        )
    return value


def _enum(enum_cls, raw: str, path: str, exc=SchemaError):
    norm = raw.strip().lower().replace(" ", "_").replace("-", "_")
    try:
        return enum_cls(norm)
    except ValueError:
        allowed = "|".join(e.value for e in enum_cls)
        raise exc(f"unknown value {raw!r} (allowed: {allowed})", path) from None


def _parse_finding(obj: Any, path: str) -> Finding:
    if not isinstance(obj, dict):
        raise SchemaError("finding must be an object", path)
    fid = _get(obj, "id", str, path)
    if not fid:
        raise SchemaError("finding id must be non-empty", f"{path}/id")
    text = _get(obj, "entity_text", str, path)
    if not text.strip():
        raise SchemaError("entity_text must be non-empty", f"{path}/entity_text")
    category = _enum(EntityCategory, _get(obj, "category", str, path), f"{path}/category", UnknownCategory)
    status = _enum(DxStatus, _get(obj, "dx_status", str, path), f"{path}/dx_status")
    certainty = _enum(DxCertainty, _get(obj, "dx_certainty", str, path), f"{path}/dx_certainty")

    attrs_raw = _get(obj, "attributes", dict, path, required=False, default={})
    attributes: dict[AttributeKind, tuple[str, ...]] = {}
    for key, values in attrs_raw.items():
        apath = f"{path}/attributes/{key}"
        kind = _enum(AttributeKind, key, apath, UnknownAttributeKind)
        if kind.is_binary:
            raise SchemaError(f"{kind.value} belongs in its dedicated field, not in attributes", apath)
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise SchemaError("attribute values must be a list of strings", apath)
        if any(not v.strip() for v in values):
            raise SchemaError("attribute values must be non-empty strings", apath)
        if values:
            attributes[kind] = tuple(values)

    relations = []
    for i, rel in enumerate(_get(obj, "relations", list, path, required=False, default=[])):
        rpath = f"{path}/relations/{i}"
        if not isinstance(rel, dict):
            raise SchemaError("relation must be an object", rpath)
        kind = _enum(RelationKind, _get(rel, "kind", str, rpath), f"{rpath}/kind")
        relations.append(Relation(kind, _get(rel, "target_id", str, rpath)))

    sent_idx = _get(obj, "sent_idx", int, path)
    if sent_idx < 1:
        raise SchemaError("sent_idx must be >= 1", f"{path}/sent_idx")
    section = _enum(Section, _get(obj, "section", str, path), f"{path}/section", UnknownSection)
    return Finding(
        id=fid,
        entity_text=text,
        category=category,
        dx_status=status,
        dx_certainty=certainty,
        attributes=attributes,
        relations=tuple(relations),
        sent_idx=sent_idx,
        section=section,
    )


def report_from_dict(obj: Any, path: str = "") -> StructuredReport:
    """Build and validate a report from decoded JSON."""
    if not isinstance(obj, dict):
        raise SchemaError("report must be a JSON object", path)
    study_id = _get(obj, "study_id", str, path)
    study_day = _get(obj, "study_day", int, path)
    if study_day < 0:
        raise SchemaError("study_day must be >= 0", f"{path}/study_day")
    findings = tuple(
        _parse_finding(f, f"{path}/findings/{i}")
        for i, f in enumerate(_get(obj, "findings", list, path))
    )
    source = _get(obj, "source_text", dict, path, required=False)
    if source is not None:
        for key, val in source.items():
            _enum(Section, key, f"{path}/source_text/{key}", UnknownSection)
            if not isinstance(val, str):
                raise SchemaError("source_text values must be strings", f"{path}/source_text/{key}")
        source = dict(source)
    report = StructuredReport(study_id, study_day, findings, source)
    validate_report(report, path)
    return report


def _member(obj: Any, path: str) -> Member:
    if not isinstance(obj, dict):
        raise SchemaError("member must be an object", path)
    return Member(_get(obj, "study_idx", int, path), _get(obj, "finding_id", str, path))


def _group_from_dict(obj: Any, path: str) -> EntityGroup:
    if not isinstance(obj, dict):
        raise SchemaError("entity group must be an object", path)
    members = tuple(_member(m, f"{path}/members/{i}") for i, m in enumerate(_get(obj, "members", list, path)))
    episodes = []
    for i, ep in enumerate(_get(obj, "episodes", list, path)):
        epath = f"{path}/episodes/{i}"
        if not isinstance(ep, dict):
            raise SchemaError("episode must be an object", epath)
        idxs = _get(ep, "member_study_idxs", list, epath)
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in idxs):
            raise SchemaError("member_study_idxs must be integers", f"{epath}/member_study_idxs")
        episodes.append(TemporalGroup(_get(ep, "episode_ordinal", int, epath), tuple(idxs)))
    return EntityGroup(
        group_id=_get(obj, "group_id", str, path),
        group_name=_get(obj, "group_name", str, path),
        members=members,
        episodes=tuple(episodes),
    )


def sequence_from_dict(obj: Any, path: str = "") -> PatientSequence:
    """Build and validate a patient sequence from decoded JSON."""
    if not isinstance(obj, dict):
        raise SchemaError("sequence must be a JSON object", path)
    patient_id = _get(obj, "patient_id", str, path)
    reports = tuple(
        report_from_dict(r, f"{path}/reports/{i}") for i, r in enumerate(_get(obj, "reports", list, path))
    )
    groups = tuple(
        _group_from_dict(g, f"{path}/entity_groups/{i}")
        for i, g in enumerate(_get(obj, "entity_groups", list, path, required=False, default=[]))
    )
    seq = PatientSequence(patient_id, reports, groups)
    validate_sequence(seq, path)
    return seq


def _loads(json_text: str | bytes):
    if isinstance(json_text, (bytes, bytearray)):
        try:
            json_text = json_text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson(f"input is not UTF-8: {exc}") from None
    try:
        return json.loads(json_text)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise MalformedJson(str(exc)) from None


def parse_report(json_text: str | bytes) -> StructuredReport:
    return report_from_dict(_loads(json_text))


def parse_sequence(json_text: str | bytes) -> PatientSequence:
    return sequence_from_dict(_loads(json_text))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_report(report: StructuredReport, path: str = "") -> StructuredReport:
    """Check cross-field invariants of a report; returns it unchanged."""
    ids: dict[str, int] = {}
    for i, f in enumerate(report.findings):
        if f.id in ids:
            raise DuplicateFindingId(f"finding id {f.id!r} is not unique", f"{path}/findings/{i}/id")
        ids[f.id] = i
    for i, f in enumerate(report.findings):
        fpath = f"{path}/findings/{i}"
        for kind in f.attributes:
            if kind.is_binary:
                raise SchemaError(f"{kind.value} belongs in its dedicated field", f"{fpath}/attributes")
        for j, rel in enumerate(f.relations):
            if rel.target_id not in ids:
                raise DanglingRelationTarget(rel.target_id, f"{fpath}/relations/{j}", finding_id=f.id)
    by_id = {f.id: f for f in report.findings}
    for i, f in enumerate(report.findings):
        for j, rel in enumerate(f.relations):
            if rel.kind is not RelationKind.EVIDENCE:
                continue
            target = by_id[rel.target_id]
            forward = Relation(RelationKind.ASSOCIATE, rel.target_id) in f.relations
            backward = Relation(RelationKind.ASSOCIATE, f.id) in target.relations
            if not (forward or backward):
                raise EvidenceWithoutAssociate(
                    f"evidence link {f.id!r} -> {rel.target_id!r} has no matching associate link",
                    f"{path}/findings/{i}/relations/{j}",
                    finding_id=f.id,
                )
    return report


def validate_sequence(seq: PatientSequence, path: str = "") -> PatientSequence:
    """Check ordering, membership and episode partition invariants."""
    if not seq.reports:
        raise SchemaError("a sequence needs at least one report", f"{path}/reports")
    seen_ids = set()
    for t, report in enumerate(seq.reports):
        validate_report(report, f"{path}/reports/{t}")
        if report.study_id in seen_ids:
            raise UnorderedStudies(f"duplicate study_id {report.study_id!r}", f"{path}/reports/{t}/study_id")
        seen_ids.add(report.study_id)
        if t and report.study_day <= seq.reports[t - 1].study_day:
            raise UnorderedStudies(
                f"study_day {report.study_day} does not follow {seq.reports[t - 1].study_day}",
                f"{path}/reports/{t}/study_day",
            )
    if seq.reports[0].study_day != 0:
        raise UnorderedStudies("the first study must have study_day 0", f"{path}/reports/0/study_day")

    finding_ids = [{f.id for f in r.findings} for r in seq.reports]
    owner: dict[tuple[int, str], str] = {}
    group_ids = set()
    for g_i, group in enumerate(seq.entity_groups):
        gpath = f"{path}/entity_groups/{g_i}"
        if group.group_id in group_ids:
            raise SchemaError(f"duplicate group_id {group.group_id!r}", f"{gpath}/group_id")
        group_ids.add(group.group_id)
        if not group.members:
            raise SchemaError("entity group has no members", f"{gpath}/members")
        for m_i, m in enumerate(group.members):
            mpath = f"{gpath}/members/{m_i}"
            if not 0 <= m.study_idx < len(seq.reports) or m.finding_id not in finding_ids[m.study_idx]:
                raise MemberNotFound(f"no finding {m.finding_id!r} in study {m.study_idx}", mpath)
            key = (m.study_idx, m.finding_id)
            if key in owner:
                raise DuplicateGroupMember(
                    f"finding {m.finding_id!r} of study {m.study_idx} already belongs to group {owner[key]!r}",
                    mpath,
                )
            owner[key] = group.group_id
        _check_episodes(group, gpath)
    return seq


def _check_episodes(group: EntityGroup, gpath: str) -> None:
    member_studies = {m.study_idx for m in group.members}
    claimed: dict[int, int] = {}
    for e_i, ep in enumerate(group.episodes):
        epath = f"{gpath}/episodes/{e_i}"
        if not ep.member_study_idxs:
            raise InvalidEpisodes("episode has no studies", epath)
        for idx in ep.member_study_idxs:
            if idx in claimed:
                raise OverlappingEpisodes(
                    f"study {idx} is in episodes {claimed[idx]} and {ep.episode_ordinal}", epath
                )
            claimed[idx] = ep.episode_ordinal
    extra = set(claimed) - member_studies
    if extra:
        raise InvalidEpisodes(f"episodes reference studies {sorted(extra)} with no group member", gpath)
    missing = member_studies - set(claimed)
    if missing:
        raise InvalidEpisodes(f"members in studies {sorted(missing)} are not in any episode", gpath)
    ordinals = [ep.episode_ordinal for ep in group.episodes]
    if sorted(ordinals) != list(range(1, len(ordinals) + 1)):
        raise InvalidEpisodes(f"episode ordinals {ordinals} are not 1..{len(ordinals)}", gpath)
    starts = [min(ep.member_study_idxs) for ep in sorted(group.episodes, key=lambda e: e.episode_ordinal)]
    if starts != sorted(starts):
        raise InvalidEpisodes("episode ordinals must follow the chronological order of episodes", gpath)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_KIND_ORDER = {k: i for i, k in enumerate(AttributeKind)}


def _finding_to_dict(f: Finding) -> dict:
    return {
        "id": f.id,
        "entity_text": f.entity_text,
        "category": f.category.value,
        "dx_status": f.dx_status.value,
        "dx_certainty": f.dx_certainty.value,
        "attributes": {
            k.value: list(f.attributes[k]) for k in sorted(f.attributes, key=_KIND_ORDER.__getitem__)
        },
        "relations": [{"kind": r.kind.value, "target_id": r.target_id} for r in f.relations],
        "sent_idx": f.sent_idx,
        "section": f.section.value,
    }


def report_to_dict(report: StructuredReport) -> dict:
    out = {
        "study_id": report.study_id,
        "study_day": report.study_day,
        "findings": [_finding_to_dict(f) for f in report.findings],
    }
    if report.source_text is not None:
        out["source_text"] = dict(report.source_text)
    return out


def sequence_to_dict(seq: PatientSequence) -> dict:
    return {
        "patient_id": seq.patient_id,
        "reports": [report_to_dict(r) for r in seq.reports],
        "entity_groups": [
            {
                "group_id": g.group_id,
                "group_name": g.group_name,
                "members": [{"study_idx": m.study_idx, "finding_id": m.finding_id} for m in g.members],
                "episodes": [
                    {"episode_ordinal": e.episode_ordinal, "member_study_idxs": list(e.member_study_idxs)}
                    for e in g.episodes
                ],
            }
            for g in seq.entity_groups
        ],
    }


def dumps(obj: StructuredReport | PatientSequence, **kwargs) -> str:
    """Serialize a report or sequence to compact, key-stable JSON."""
    data = sequence_to_dict(obj) if isinstance(obj, PatientSequence) else report_to_dict(obj)
    kwargs.setdefault("ensure_ascii", False)
    return json.dumps(data, **kwargs)


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

_PARSERS = {"sequence": sequence_from_dict, "report": report_from_dict}


def iter_corpus(path: str | os.PathLike, kind: str = "sequence"):
    """Yield ``(line_number, value_or_error)`` for every document in ``path``.

    ``path`` is a JSON-Lines file (blank lines skipped) or a directory of
    ``*.json`` / ``*.jsonl`` files read in name order; for directories the
    line number counts documents across files.
    """
    parse = _PARSERS[kind]
    path = Path(path)
    if path.is_dir():
        n = 0
        for file in sorted(p for p in path.iterdir() if p.suffix in (".json", ".jsonl")):
            if file.suffix == ".jsonl":
                for _, item in iter_corpus(file, kind):
                    n += 1
                    yield n, item
            else:
                n += 1
                yield n, _parse_safely(parse, file.read_bytes())
        return
    with open(path, "rb") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield n, _parse_safely(parse, line)


def _parse_safely(parse, raw: bytes):
    try:
        return parse(_loads(raw))
    except ValidationError as exc:
        return exc


def load_corpus(path: str | os.PathLike, kind: str = "sequence", lenient: bool = False) -> list:
    """Load every document of a corpus.

    In strict mode any invalid line raises :class:`CorpusError` listing all
    bad lines; with ``lenient=True`` they are logged and skipped.
    """
    items, errors = [], []
    for n, item in iter_corpus(path, kind):
        if isinstance(item, ValidationError):
            errors.append((n, item))
        else:
            items.append(item)
    if errors:
        if not lenient:
            raise CorpusError(str(path), errors)
        for n, err in errors:
            logger.warning("%s:%d skipped: %s", path, n, err)
    return items
