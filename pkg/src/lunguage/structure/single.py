"""Single-report structuring: prompt construction, output conversion and
the validate-and-repair loop.

The model answers in a relation-list format::

    {"entities": [{"ent_idx": 1, "text": "pleural effusion", "sent_idx": 2,
                   "section": "findings"}, ...],
     "relations": [{"subject_ent": 1, "subject_cat": "PF", "relation": "Cat",
                    "value": "pf", "sent_idx": 2}, ...]}

Conversion rules (:func:`relations_to_report`):

* every entity becomes a finding with id ``e<ent_idx>``;
* ``Cat`` sets the category (``subject_cat`` is the fallback),
  ``Status``/``Dx_Status`` the diagnostic status and ``Dx_Certainty`` the
  certainty;
* ``Associate``/``Evidence`` rows point at another entity through
  ``obj_ent_idx`` and become finding relations;
* every other relation is an attribute; its value is ``value`` or, failing
  that, the text of the entity named by ``obj_ent_idx``.

A response that already carries a ``findings`` list is read as a report
document directly. Either way the result goes through the model
validator.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, NamedTuple

from ..errors import EmptyReport, MalformedJson, SchemaError, ValidationError, ValidationExhausted
from ..model import RelationKind, Section, StructuredReport, report_from_dict
from ..vocab import match_spans, split_sentences
from .retrieval import FewShotIndex

logger = logging.getLogger(__name__)


def load_template(name: str) -> str:
    return resources.files("lunguage.structure").joinpath("data", name).read_text(encoding="utf-8")


SINGLE_SYSTEM_PROMPT = load_template("single_prompt.txt")


# ---------------------------------------------------------------------------
# request
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SentenceRequest:
    section: str
    sent_idx: int
    sentence: str
    candidates: tuple[tuple[str, tuple[str, ...]], ...]

    def to_dict(self) -> dict:
        return {
            "section": self.section,
            "sent_idx": self.sent_idx,
            "sentence": self.sentence,
            "candidates": [[text, list(cats)] for text, cats in self.candidates],
        }


def _sections(report_text: str | Mapping[str, str]) -> list[tuple[str, str]]:
    if isinstance(report_text, str):
        return [(Section.FINDINGS.value, report_text)]
    order = {s.value: i for i, s in enumerate(Section)}
    unknown = [k for k in report_text if k not in order]
    if unknown:
        raise ValueError(f"unknown report sections {unknown} (allowed: {', '.join(order)})")
    return sorted(report_text.items(), key=lambda kv: order[kv[0]])


def build_request(report_text: str | Mapping[str, str], vocab) -> list[SentenceRequest]:
    """Split each section into sentences and attach vocabulary candidates.

    Candidates list each matched span once, with all of its categories, in
    match order.
    """
    out = []
    for section, text in _sections(report_text):
        sentences = split_sentences(text)
        matches = match_spans(vocab, sentences) if vocab is not None else []
        by_sent: dict[int, dict[str, list[str]]] = {}
        for m in matches:
            cats = by_sent.setdefault(m.sent_idx, {}).setdefault(m.text, [])
            if m.category not in cats:
                cats.append(m.category)
        for i, sentence in enumerate(sentences, start=1):
            cands = tuple((t, tuple(c)) for t, c in by_sent.get(i, {}).items())
            out.append(SentenceRequest(section, i, sentence, cands))
    if not out:
        raise EmptyReport("report has no text to structure")
    return out


def request_text(report_text: str | Mapping[str, str]) -> str:
    return report_text if isinstance(report_text, str) else " ".join(t for _, t in _sections(report_text))


# ---------------------------------------------------------------------------
# relation-list conversion
# ---------------------------------------------------------------------------

_DEDICATED = {"cat": "category", "status": "dx_status", "dx_status": "dx_status",
              "dx_certainty": "dx_certainty", "certainty": "dx_certainty"}
_FINDING_RELATIONS = {k.value for k in RelationKind}


def _relation_key(name: str) -> str:
    return re.sub(r"[\s\-]+", "_", name.strip()).lower()


def _idx(value) -> int | None:
    return value if isinstance(value, int) and not isinstance(value, bool) else None


def relations_to_report(doc: Mapping, study_id: str, study_day: int,
                        source_text: Mapping[str, str] | None = None) -> StructuredReport:
    """Convert decoded model output into a validated report."""
    if not isinstance(doc, Mapping):
        raise SchemaError("output must be a JSON object")
    if "findings" in doc:
        data = dict(doc)
        data.setdefault("study_id", study_id)
        data.setdefault("study_day", study_day)
        if source_text is not None:
            data.setdefault("source_text", dict(source_text))
        return report_from_dict(data)

    entities = doc.get("entities")
    relations = doc.get("relations", [])
    if not isinstance(entities, list) or not isinstance(relations, list):
        raise SchemaError("output needs an 'entities' list and a 'relations' list")
    findings: dict[int, dict] = {}
    for i, ent in enumerate(entities):
        path = f"/entities/{i}"
        idx = _idx(ent.get("ent_idx")) if isinstance(ent, Mapping) else None
        if idx is None:
            raise SchemaError("entity needs an integer 'ent_idx'", path)
        if idx in findings:
            raise SchemaError(f"duplicate ent_idx {idx}", path)
        findings[idx] = {
            "id": f"e{idx}",
            "entity_text": ent.get("text"),
            "attributes": {},
            "relations": [],
            "sent_idx": ent.get("sent_idx", 1),
            "section": ent.get("section", Section.FINDINGS.value),
        }
    for i, row in enumerate(relations):
        path = f"/relations/{i}"
        if not isinstance(row, Mapping):
            raise SchemaError("relation row must be an object", path)
        subj = _idx(row.get("subject_ent"))
        if subj not in findings:
            raise SchemaError(f"subject_ent {subj!r} names no entity", f"{path}/subject_ent")
        f = findings[subj]
        if "subject_cat" in row and "category" not in f:
            f["category"] = str(row["subject_cat"]).lower()
        rel = row.get("relation")
        if not isinstance(rel, str) or not rel.strip():
            raise SchemaError("relation must be a non-empty string", f"{path}/relation")
        key = _relation_key(rel)
        obj = _idx(row.get("obj_ent_idx"))
        if key in _FINDING_RELATIONS:
            if obj not in findings:
                raise SchemaError(f"obj_ent_idx {obj!r} names no entity", f"{path}/obj_ent_idx")
            f["relations"].append({"kind": key, "target_id": f"e{obj}"})
            continue
        value = row.get("value")
        if value is None and obj in findings:
            value = findings[obj]["entity_text"]
        if not isinstance(value, str):
            raise SchemaError(f"relation {rel!r} needs a string 'value' or an 'obj_ent_idx'", path)
        if key in _DEDICATED:
            field = _DEDICATED[key]
            # Cat rows are authoritative over subject_cat
            if field == "category" or field not in f:
                f[field] = value.lower()
            continue
        values = f["attributes"].setdefault(key, [])
        if value not in values:
            values.append(value)
    data = {"study_id": study_id, "study_day": study_day, "findings": [findings[k] for k in sorted(findings)]}
    if source_text is not None:
        data["source_text"] = dict(source_text)
    return report_from_dict(data)


_ATTRIBUTE_RELATION_NAMES = {
    "no_change": "No Change",
    "past_hx": "Past Hx",
    "other_source": "Other Source",
    "assessment_limitations": "Assessment Limitations",
}


def report_to_relation_rows(report: StructuredReport) -> dict:
    """Inverse of :func:`relations_to_report` for reports whose finding ids
    follow the ``e<n>`` convention (other ids are renumbered by position)."""
    idx_of = {}
    for pos, f in enumerate(report.findings, start=1):
        m = re.fullmatch(r"e(\d+)", f.id)
        idx_of[f.id] = int(m.group(1)) if m else pos
    entities, rows = [], []
    for f in report.findings:
        i = idx_of[f.id]
        entities.append({"ent_idx": i, "text": f.entity_text, "sent_idx": f.sent_idx, "section": f.section.value})
        base = {"subject_ent": i, "subject_cat": f.category.value.upper()}
        rows.append({**base, "relation": "Cat", "value": f.category.value, "sent_idx": f.sent_idx})
        rows.append({**base, "relation": "Dx_Status", "value": f.dx_status.value, "sent_idx": f.sent_idx})
        rows.append({**base, "relation": "Dx_Certainty", "value": f.dx_certainty.value, "sent_idx": f.sent_idx})
        for kind, values in f.attributes.items():
            name = _ATTRIBUTE_RELATION_NAMES.get(kind.value, kind.value.title())
            for v in values:
                rows.append({**base, "relation": name, "value": v, "sent_idx": f.sent_idx})
        for r in f.relations:
            rows.append({**base, "relation": r.kind.value.title(), "obj_ent_idx": idx_of[r.target_id],
                         "sent_idx": f.sent_idx})
    return {"entities": entities, "relations": rows}


# ---------------------------------------------------------------------------
# prompt
# ---------------------------------------------------------------------------

def _payload_json(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=1)


def build_single_prompt(report_text: str | Mapping[str, str], vocab=None, index: FewShotIndex | None = None,
                        k_shots: int = 0, max_example_tokens: int | None = None) -> tuple[str, str]:
    """System prompt and JSON user payload for one report.

    Examples are the ``k_shots`` nearest index documents by BM25 against
    the report text, each given as its request and its relation-list
    answer. With ``max_example_tokens`` set, examples are added in rank
    order while their whitespace token count stays within the budget.
    """
    request = build_request(report_text, vocab)
    payload: dict = {"report_sections": [s.to_dict() for s in request]}
    if k_shots and index is not None and len(index):
        if k_shots > len(index):
            logger.warning("requested %d shots but the index holds %d documents; using all", k_shots, len(index))
        examples, used = [], 0
        for i in index.retrieve(request_text(report_text), k_shots):
            text, gold = index.corpus[i]
            ex = {
                "related_example": {"report_sections": [s.to_dict() for s in build_request(text, vocab)]},
                "structured_report": report_to_relation_rows(gold),
            }
            cost = len(_payload_json(ex).split())
            if max_example_tokens is not None and used + cost > max_example_tokens:
                continue
            used += cost
            examples.append(ex)
        if examples:
            payload["examples"] = examples
    return SINGLE_SYSTEM_PROMPT, _payload_json(payload)


# ---------------------------------------------------------------------------
# repair loop
# ---------------------------------------------------------------------------

class Exchange(NamedTuple):
    user: str
    response: str
    error: str | None


def repair_message(user: str, err: Exception) -> str:
    if isinstance(err, ValidationError):
        detail = f"{err.code} at {err.path or '/'}: {err.message}"
    else:
        detail = f"{type(err).__name__}: {err}"
    return (
        f"{user}\n\nYour previous output was rejected by the validator:\n- {detail}\n"
        "Return a corrected single JSON object."
    )


def _decode(text: str):
    """Parse a JSON object, tolerating a fenced code block around it."""
    stripped = text.strip()
    fence = re.fullmatch(r"```(?:json)?\s*(.*?)\s*```", stripped, re.S)
    if fence:
        stripped = fence.group(1)
    try:
        return json.loads(stripped)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise MalformedJson(f"output is not valid JSON: {exc}") from None


def run_with_repairs(provider, system: str, user: str, convert, max_repairs: int = 2,
                     transcript: list | None = None, temperature: float = 0.0, max_tokens: int = 4096):
    """Ask ``provider`` until ``convert(decoded_json)`` succeeds.

    At most ``max_repairs + 1`` calls are made. Provider failures propagate
    at once; validation failures trigger a re-prompt that quotes the error.
    """
    if max_repairs < 0:
        raise ValueError("max_repairs must be >= 0")
    log = transcript if transcript is not None else []
    prompt = user
    last: Exception | None = None
    for _ in range(max_repairs + 1):
        raw = provider.complete(system, prompt, temperature=temperature, max_tokens=max_tokens)
        try:
            result = convert(_decode(raw))
        except ValidationError as err:
            log.append(Exchange(prompt, raw, f"{err.code}: {err}"))
            last = err
            prompt = repair_message(user, err)
            continue
        log.append(Exchange(prompt, raw, None))
        return result
    raise ValidationExhausted(last, log)


def structure_single(provider, prompt: tuple[str, str], max_repairs: int = 2, study_id: str = "s0",
                     study_day: int = 0, source_text: Mapping[str, str] | None = None,
                     transcript: list | None = None, **decoding) -> StructuredReport:
    """Run one structuring prompt through ``provider`` and validate the answer."""
    system, user = prompt

    def convert(doc):
        return relations_to_report(doc, study_id, study_day, source_text)

    return run_with_repairs(provider, system, user, convert, max_repairs, transcript, **decoding)


__all__ = [
    "SINGLE_SYSTEM_PROMPT",
    "SentenceRequest",
    "Exchange",
    "build_request",
    "build_single_prompt",
    "relations_to_report",
    "report_to_relation_rows",
    "repair_message",
    "run_with_repairs",
    "structure_single",
]
