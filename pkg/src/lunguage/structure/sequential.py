"""Sequential structuring: group a patient's findings across studies into
entity groups and episodes."""

from __future__ import annotations

import json
import re
from dataclasses import replace
from typing import Mapping, NamedTuple

from ..errors import DuplicatedFinding, InvalidEpisodes, SchemaError, UncoveredFinding
from ..model import EntityGroup, Finding, Member, PatientSequence, TemporalGroup, validate_sequence
from ..score.components import linearize_single
from .single import load_template, run_with_repairs

SEQUENTIAL_SYSTEM_PROMPT = load_template("sequential_prompt.txt")


class GroupingLine(NamedTuple):
    idx: int
    study_idx: int
    day: int
    finding: Finding
    text: str


def grouping_lines(seq: PatientSequence) -> list[GroupingLine]:
    """One entry per finding in chronological order; IDX counts from 1."""
    out = []
    for t, f in seq.iter_findings():
        out.append(GroupingLine(len(out) + 1, t, seq.reports[t].study_day, f, linearize_single(f)))
    return out


def linearize_sequence_for_grouping(seq: PatientSequence) -> str:
    return "\n".join(f"day {ln.day}: {ln.text}" for ln in grouping_lines(seq))


def build_grouping_prompt(seq: PatientSequence) -> tuple[str, str]:
    body = "\n".join(f"IDX {ln.idx}: day {ln.day}: {ln.text}" for ln in grouping_lines(seq))
    return SEQUENTIAL_SYSTEM_PROMPT, f"Patient {seq.patient_id} findings:\n{body}"


def _as_int(value):
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, str) and re.fullmatch(r"\s*\d+\s*", value):
        return int(value)
    return None


_EPISODE_KEY = re.compile(r"episode[_\s]*(\d+)", re.I)


def parse_grouping(seq: PatientSequence, doc: Mapping) -> PatientSequence:
    """Attach the groups described by a decoded grouping answer to ``seq``.

    Findings are resolved by IDX; an entry without a usable IDX falls back
    to its DAY and finding text. Episodes are renumbered in chronological
    order; a group without episodes forms a single one.
    """
    lines = grouping_lines(seq)
    by_idx = {ln.idx: ln for ln in lines}
    by_day_text: dict[tuple[int, str], list[GroupingLine]] = {}
    for ln in lines:
        by_day_text.setdefault((ln.day, ln.text), []).append(ln)
    day_to_study = {r.study_day: t for t, r in enumerate(seq.reports)}

    if not isinstance(doc, Mapping) or not isinstance(doc.get("results"), list):
        raise SchemaError("output needs a 'results' list")
    owner: dict[int, int] = {}
    groups = []
    for g_i, res in enumerate(doc["results"]):
        gpath = f"/results/{g_i}"
        if not isinstance(res, Mapping):
            raise SchemaError("group must be an object", gpath)
        name = res.get("group_name")
        if not isinstance(name, str) or not name.strip():
            raise SchemaError("group_name must be a non-empty string", f"{gpath}/group_name")
        entries = res.get("findings")
        if not isinstance(entries, list) or not entries:
            raise SchemaError("group needs a non-empty 'findings' list", f"{gpath}/findings")
        members: list[GroupingLine] = []
        for f_i, entry in enumerate(entries):
            fpath = f"{gpath}/findings/{f_i}"
            if not isinstance(entry, Mapping):
                raise SchemaError("finding entry must be an object", fpath)
            ln = by_idx.get(_as_int(entry.get("IDX")))
            if ln is None:
                cands = by_day_text.get((_as_int(entry.get("DAY")), str(entry.get("finding", "")).strip()), [])
                cands = [c for c in cands if c.idx not in owner]
                if not cands:
                    raise SchemaError(f"entry names no finding (IDX {entry.get('IDX')!r})", fpath)
                ln = cands[0]
            if ln.idx in owner:
                raise DuplicatedFinding(
                    f"IDX {ln.idx} is in groups {owner[ln.idx] + 1} and {g_i + 1}", fpath, idx=ln.idx
                )
            owner[ln.idx] = g_i
            members.append(ln)
        member_studies = {m.study_idx for m in members}

        raw_eps = res.get("episodes") or []
        if not isinstance(raw_eps, list):
            raise SchemaError("episodes must be a list", f"{gpath}/episodes")
        episodes: list[tuple[int, ...]] = []
        for e_i, ep in enumerate(raw_eps):
            epath = f"{gpath}/episodes/{e_i}"
            if not isinstance(ep, Mapping) or len(ep) != 1:
                raise SchemaError('episode must look like {"episode_n": {"days": [...]}}', epath)
            (key, body), = ep.items()
            if not _EPISODE_KEY.fullmatch(str(key)) or not isinstance(body, Mapping):
                raise SchemaError('episode must look like {"episode_n": {"days": [...]}}', epath)
            days = body.get("days")
            if not isinstance(days, list) or not days:
                raise SchemaError("episode needs a non-empty 'days' list", f"{epath}/days")
            studies = set()
            for d in days:
                t = day_to_study.get(_as_int(d))
                if t is None or t not in member_studies:
                    raise InvalidEpisodes(f"episode day {d!r} has no finding in this group", f"{epath}/days")
                studies.add(t)
            episodes.append(tuple(sorted(studies)))
        if not episodes:
            episodes = [tuple(sorted(member_studies))]
        episodes.sort()
        temporal = tuple(TemporalGroup(i, eps) for i, eps in enumerate(episodes, start=1))
        groups.append(EntityGroup(
            f"g{g_i + 1}", name.strip(), tuple(Member(m.study_idx, m.finding.id) for m in members), temporal
        ))

    missing = [ln.idx for ln in lines if ln.idx not in owner]
    if missing:
        raise UncoveredFinding(f"findings {missing} are in no group", "/results", idxs=missing)
    return validate_sequence(replace(seq, entity_groups=tuple(groups)))


def structure_sequence(provider, seq: PatientSequence, max_repairs: int = 2, transcript: list | None = None,
                       **decoding) -> PatientSequence:
    """Group the findings of ``seq`` with ``provider``; existing groups are replaced."""
    if not grouping_lines(seq):
        return replace(seq, entity_groups=())
    system, user = build_grouping_prompt(seq)
    return run_with_repairs(provider, system, user, lambda doc: parse_grouping(seq, doc), max_repairs,
                            transcript, **decoding)


def grouping_answer(seq: PatientSequence) -> str:
    """Grouping answer that reproduces the groups already on ``seq``.

    Used to build scripted transcripts and few-shot material.
    """
    lines = {(ln.study_idx, ln.finding.id): ln for ln in grouping_lines(seq)}
    results = []
    for g in seq.entity_groups:
        entries = [lines[(m.study_idx, m.finding_id)] for m in g.members]
        results.append({
            "group_name": g.group_name,
            "findings": [{"IDX": ln.idx, "DAY": ln.day, "finding": ln.text} for ln in entries],
            "episodes": [
                {f"episode_{e.episode_ordinal}": {"days": [seq.reports[t].study_day for t in e.member_study_idxs]}}
                for e in g.episodes
            ],
            "rationale": "",
        })
    return json.dumps({"results": results}, ensure_ascii=False, indent=1)
