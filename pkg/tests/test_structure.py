import json
import logging

import httpx
import pytest
from conftest import FIXTURES, finding, report
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bm25_scores

from lunguage.errors import (
    DuplicatedFinding,
    EmptyReport,
    InvalidEpisodes,
    ProviderUnavailable,
    SchemaError,
    UncoveredFinding,
    UnknownCategory,
    ValidationExhausted,
)
from lunguage.model import PatientSequence, load_corpus
from lunguage.structure import (
    SEQUENTIAL_SYSTEM_PROMPT,
    SINGLE_SYSTEM_PROMPT,
    FewShotIndex,
    HttpCompletionProvider,
    RateLimiter,
    ReportStructurer,
    ScriptedProvider,
    build_grouping_prompt,
    build_request,
    build_single_prompt,
    completion_from_env,
    grouping_answer,
    linearize_sequence_for_grouping,
    parse_grouping,
    prompt_hash,
    relations_to_report,
    report_to_relation_rows,
    structure_sequence,
    structure_single,
)
from lunguage.vocab import Vocabulary, load_vocabulary

TOY_DOCS = [
    "small left pleural effusion",
    "no pneumothorax",
    "left pleural effusion increased",
    "heart size normal",
    "endotracheal tube in standard position",
    "effusion effusion left base",
]


def toy_index():
    return FewShotIndex([(t, report(finding("e1", t.split()[-1]))) for t in TOY_DOCS])


def gold_sequences():
    return load_corpus(FIXTURES / "gold_sequences.jsonl")


def rows(*entities, relations=()):
    return {
        "entities": [{"ent_idx": i, "text": t, "sent_idx": 1} for i, t in entities],
        "relations": list(relations),
    }


def rel(subj, relation, value=None, obj=None, cat="PF"):
    out = {"subject_ent": subj, "subject_cat": cat, "relation": relation}
    if value is not None:
        out["value"] = value
    if obj is not None:
        out["obj_ent_idx"] = obj
    return out


VALID = rows((1, "opacity"), relations=[rel(1, "Cat", "pf"), rel(1, "Status", "positive"),
                                          rel(1, "Dx_Certainty", "definitive")])


class TestRetrieval:
    def test_top_five_of_six(self):
        index = toy_index()
        query = "left pleural effusion"
        expected = bm25_scores(TOY_DOCS, query)
        order = sorted(range(6), key=lambda i: (-expected[i], i))[:5]
        assert index.retrieve(query, 5) == order
        assert index.retrieve(query, 5)[:2] == [0, 2]

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.lists(st.sampled_from(["a", "b", "c", "D", "e"]), max_size=8).map(" ".join),
                 min_size=1, max_size=20),
        st.lists(st.sampled_from(["a", "b", "d", "z"]), max_size=5).map(" ".join),
    )
    def test_matches_brute_force(self, corpus, query):
        index = FewShotIndex([(t, report()) for t in corpus])
        got = index.scores(query)
        for g, e in zip(got, bm25_scores(corpus, query)):
            assert g == pytest.approx(e, rel=1e-12, abs=1e-12)
        expected = bm25_scores(corpus, query)
        assert [expected[i] for i in index.retrieve(query, len(corpus))] == sorted(expected, reverse=True)

    def test_k_zero_and_empty_index(self):
        assert toy_index().retrieve("left", 0) == []
        assert FewShotIndex([]).retrieve("left", 3) == []


class TestPrompt:
    def test_zero_shot_has_no_examples(self):
        system, user = build_single_prompt("Small left pleural effusion.", {"effusion.": ["Entity1"]})
        payload = json.loads(user)
        assert system == SINGLE_SYSTEM_PROMPT
        assert "examples" not in payload
        assert payload["report_sections"] == [{
            "section": "findings", "sent_idx": 1, "sentence": "Small left pleural effusion.",
            "candidates": [["effusion.", ["Entity1"]]],
        }]

    def test_consolidation_candidate(self):
        req = build_request("there is no focal consolidation", {"consolidation": ["Entity1"]})
        assert ("consolidation", ("Entity1",)) in req[0].candidates

    def test_candidates_group_categories(self):
        v = Vocabulary.from_mapping({"left lung": ["Entity1", "Location1"]})
        assert build_request("left lung", v)[0].candidates == (("left lung", ("Entity1", "Location1")),)

    def test_section_order_and_numbering(self):
        req = build_request({"impression": "Effusion.", "findings": "A. B."}, None)
        assert [(r.section, r.sent_idx) for r in req] == [("findings", 1), ("findings", 2), ("impression", 1)]

    def test_rejects_unknown_section(self):
        with pytest.raises(ValueError):
            build_request({"technique": "PA view."}, None)

    def test_empty_report(self):
        with pytest.raises(EmptyReport):
            build_request("   ", None)

    def test_examples_from_index(self):
        _, user = build_single_prompt("left pleural effusion", None, toy_index(), k_shots=2)
        examples = json.loads(user)["examples"]
        assert [e["related_example"]["report_sections"][0]["sentence"] for e in examples] == [
            TOY_DOCS[0], TOY_DOCS[2]
        ]
        assert examples[0]["structured_report"]["entities"][0]["text"] == "effusion"

    def test_more_shots_than_documents(self, caplog):
        index = FewShotIndex([(t, report()) for t in TOY_DOCS[:3]])
        with caplog.at_level(logging.WARNING):
            _, user = build_single_prompt("left effusion", None, index, k_shots=5)
        assert len(json.loads(user)["examples"]) == 3
        assert "using all" in caplog.text

    def test_example_token_budget(self):
        _, full = build_single_prompt("left pleural effusion", None, toy_index(), k_shots=3)
        _, none = build_single_prompt("left pleural effusion", None, toy_index(), k_shots=3, max_example_tokens=1)
        assert len(json.loads(full)["examples"]) == 3
        assert "examples" not in json.loads(none)

    def test_byte_stable(self):
        vocab = load_vocabulary(FIXTURES / "vocab.tsv")
        corpus = [(dict(r.source_text), r) for s in gold_sequences() for r in s.reports]
        a = build_single_prompt(corpus[0][0], vocab, FewShotIndex(corpus[1:]), k_shots=3)
        b = build_single_prompt(corpus[0][0], vocab, FewShotIndex(corpus[1:]), k_shots=3)
        assert a == b
        assert prompt_hash(*a) == prompt_hash(*b)

    def test_golden_prompt(self):
        vocab = load_vocabulary(FIXTURES / "vocab.tsv")
        corpus = [(dict(r.source_text)["findings"], r) for s in gold_sequences() for r in s.reports]
        _, user = build_single_prompt(corpus[0][0], vocab, FewShotIndex(corpus[1:]), k_shots=2)
        assert user == (FIXTURES / "golden_prompt.json").read_text(encoding="utf-8")

    def test_grouping_prompt(self):
        seq = gold_sequences()[0]
        system, user = build_grouping_prompt(seq)
        assert system == SEQUENTIAL_SYSTEM_PROMPT
        assert user.splitlines() == [
            "Patient p001 findings:",
            "IDX 1: day 0: pleural effusion left small",
            "IDX 2: day 0: cardiomegaly",
            "IDX 3: day 3: pleural effusion left decreased substantially",
        ]


class TestLinearizeForGrouping:
    def test_single_line(self):
        seq = PatientSequence("p", (report(finding(text="opacity", location=["right lung"])),))
        assert linearize_sequence_for_grouping(seq) == "day 0: opacity right lung"

    def test_chronological(self):
        seq = PatientSequence("p", (
            report(finding(text="a"), study_id="s0", day=0), report(finding(text="b"), study_id="s1", day=30),
        ))
        assert linearize_sequence_for_grouping(seq) == "day 0: a\nday 30: b"

    def test_empty(self):
        assert linearize_sequence_for_grouping(PatientSequence("p", (report(),))) == ""


class TestConversion:
    def test_relation_rows(self):
        doc = rows(
            (1, "pleural effusion"), (2, "pneumonia"),
            relations=[
                rel(1, "Cat", "pf"), rel(1, "Status", "positive"), rel(1, "Certainty", "definitive"),
                rel(1, "Location", "left"), rel(1, "Location", "base"), rel(1, "No Change", "stable"),
                rel(2, "Cat", "cf", cat="CF"), rel(2, "Dx_Status", "positive"), rel(2, "Dx_Certainty", "tentative"),
                rel(2, "Associate", obj=1), rel(2, "Evidence", obj=1),
            ],
        )
        r = relations_to_report(doc, "s1", 4)
        assert [f.id for f in r.findings] == ["e1", "e2"]
        e1, e2 = r.findings
        assert dict((k.value, v) for k, v in e1.attributes.items()) == {
            "location": ("left", "base"), "no_change": ("stable",)
        }
        assert e2.category.value == "cf" and e2.dx_certainty.value == "tentative"
        assert [(x.kind.value, x.target_id) for x in e2.relations] == [("associate", "e1"), ("evidence", "e1")]

    def test_subject_cat_fallback(self):
        doc = rows((1, "tube"), relations=[rel(1, "Status", "positive", cat="OTH"), rel(1, "Dx_Certainty", "definitive")])
        assert relations_to_report(doc, "s", 0).findings[0].category.value == "oth"

    def test_attribute_value_from_object_entity(self):
        doc = rows((1, "opacity"), (2, "left lung"), relations=[
            *VALID["relations"], rel(2, "Cat", "pf"), rel(2, "Status", "positive"), rel(2, "Dx_Certainty", "definitive"),
            rel(1, "Location", obj=2),
        ])
        assert relations_to_report(doc, "s", 0).findings[0].attributes["location"] == ("left lung",)

    def test_round_trip(self):
        for seq in gold_sequences():
            for r in seq.reports:
                back = relations_to_report(report_to_relation_rows(r), r.study_id, r.study_day, r.source_text)
                assert back == r

    def test_report_document_accepted(self):
        r = gold_sequences()[0].reports[0]
        doc = {"findings": [
            {"id": f.id, "entity_text": f.entity_text, "category": f.category.value,
             "dx_status": f.dx_status.value, "dx_certainty": f.dx_certainty.value,
             "sent_idx": f.sent_idx, "section": f.section.value} for f in r.findings
        ]}
        got = relations_to_report(doc, "x", 2)
        assert got.study_id == "x" and len(got) == len(r)

    @pytest.mark.parametrize(
        "doc",
        [
            [],
            {"entities": "x"},
            rows((1, "a"), relations=[rel(9, "Cat", "pf")]),
            rows((1, "a"), relations=[rel(1, "Associate", obj=4)]),
            rows((1, "a"), relations=[rel(1, "Location")]),
            {"entities": [{"ent_idx": True, "text": "a"}], "relations": []},
            {"entities": [{"ent_idx": 1, "text": "a"}, {"ent_idx": 1, "text": "b"}], "relations": []},
        ],
    )
    def test_malformed_rows(self, doc):
        with pytest.raises(SchemaError):
            relations_to_report(doc, "s", 0)

    def test_unknown_category(self):
        doc = rows((1, "a"), relations=[rel(1, "Cat", "XYZ"), rel(1, "Status", "positive"),
                                        rel(1, "Dx_Certainty", "definitive")])
        with pytest.raises(UnknownCategory):
            relations_to_report(doc, "s", 0)


def scripted(prompt, *answers):
    """Provider answering the first prompt, then each repair prompt in turn."""
    from lunguage.structure.single import _decode, repair_message

    system, user = prompt
    provider = ScriptedProvider({})
    current = user
    for ans in answers:
        provider.add(system, current, ans)
        try:
            relations_to_report(_decode(ans), "s0", 0)
        except Exception as err:  # noqa: BLE001 - mirrors the loop's own handling
            current = repair_message(user, err)
    return provider


class TestRepairLoop:
    PROMPT = ("system", "user")

    def test_valid_first_time(self):
        provider = scripted(self.PROMPT, json.dumps(VALID))
        r = structure_single(provider, self.PROMPT)
        assert r.findings[0].entity_text == "opacity"
        assert provider.calls == 1

    def test_recovers_from_malformed_json(self):
        provider = scripted(self.PROMPT, '{"entities": [', json.dumps(VALID))
        transcript = []
        structure_single(provider, self.PROMPT, transcript=transcript)
        assert provider.calls == 2
        assert [x.error is None for x in transcript] == [False, True]
        assert transcript[0].error.startswith("MalformedJson")
        assert "rejected by the validator" in transcript[1].user

    def test_fenced_output(self):
        provider = scripted(self.PROMPT, "```json\n" + json.dumps(VALID) + "\n```")
        assert len(structure_single(provider, self.PROMPT)) == 1

    @pytest.mark.parametrize("max_repairs", [0, 1, 2, 4])
    def test_persistent_invention_exhausts(self, max_repairs):
        bad = rows((1, "a"), relations=[rel(1, "Cat", "XYZ"), rel(1, "Status", "positive"),
                                        rel(1, "Dx_Certainty", "definitive")])
        provider = scripted(self.PROMPT, *[json.dumps(bad)] * (max_repairs + 3))
        with pytest.raises(ValidationExhausted) as info:
            structure_single(provider, self.PROMPT, max_repairs=max_repairs)
        assert provider.calls == max_repairs + 1
        assert isinstance(info.value.last_error, UnknownCategory)
        assert "UnknownCategory" in str(info.value) and "XYZ" in str(info.value)

    def test_provider_failure_propagates(self):
        with pytest.raises(ProviderUnavailable):
            structure_single(ScriptedProvider({}), self.PROMPT)

    def test_negative_repairs(self):
        with pytest.raises(ValueError):
            structure_single(scripted(self.PROMPT, json.dumps(VALID)), self.PROMPT, max_repairs=-1)


def three_finding_sequence():
    return PatientSequence("p9", (
        report(finding("e1", "opacity"), study_id="s0", day=0),
        report(finding("e1", "opacity"), study_id="s1", day=2),
        report(finding("e1", "opacity"), finding("e2", "effusion"), study_id="s2", day=9),
    ))


def group(name, idxs, episodes=None):
    out = {"group_name": name, "findings": [{"IDX": i} for i in idxs], "rationale": ""}
    if episodes is not None:
        out["episodes"] = [{f"episode_{k}": {"days": d}} for k, d in enumerate(episodes, start=1)]
    return out


class TestGrouping:
    def test_one_group_one_episode(self):
        seq = three_finding_sequence()
        got = parse_grouping(seq, {"results": [group("opacity", [1, 2, 3], [[0, 2, 9]]), group("effusion", [4])]})
        g = got.entity_groups[0]
        assert [tuple(m) for m in g.members] == [(0, "e1"), (1, "e1"), (2, "e1")]
        assert [e.member_study_idxs for e in g.episodes] == [(0, 1, 2)]
        assert got.entity_groups[1].episodes[0].member_study_idxs == (2,)

    def test_episodes_renumbered_chronologically(self):
        seq = three_finding_sequence()
        got = parse_grouping(seq, {"results": [group("opacity", [1, 2, 3], [[9], [0, 2]]), group("effusion", [4])]})
        assert [(e.episode_ordinal, e.member_study_idxs) for e in got.entity_groups[0].episodes] == [
            (1, (0, 1)), (2, (2,))
        ]

    def test_uncovered(self):
        with pytest.raises(UncoveredFinding):
            parse_grouping(three_finding_sequence(), {"results": [group("opacity", [1, 2, 3])]})

    def test_duplicated(self):
        with pytest.raises(DuplicatedFinding):
            parse_grouping(three_finding_sequence(), {"results": [group("a", [1, 2, 3]), group("b", [3, 4])]})

    def test_episode_day_outside_group(self):
        with pytest.raises(InvalidEpisodes):
            parse_grouping(three_finding_sequence(),
                           {"results": [group("opacity", [1, 2, 3], [[0, 5]]), group("effusion", [4])]})

    def test_day_text_fallback(self):
        doc = {"results": [
            group("opacity", [1, 2, 3]),
            {"group_name": "effusion", "findings": [{"IDX": "none", "DAY": 9, "finding": "effusion"}]},
        ]}
        assert parse_grouping(three_finding_sequence(), doc).entity_groups[1].members[0].finding_id == "e2"

    def test_string_idx(self):
        doc = {"results": [group("opacity", ["1", "2", "3"]), group("effusion", [4])]}
        assert len(parse_grouping(three_finding_sequence(), doc).entity_groups) == 2

    @pytest.mark.parametrize("doc", [{}, {"results": [{"group_name": "", "findings": [{"IDX": 1}]}]},
                                     {"results": [group("a", [99])]}])
    def test_schema_errors(self, doc):
        with pytest.raises(SchemaError):
            parse_grouping(three_finding_sequence(), doc)

    def test_structure_sequence_round_trip(self):
        for seq in gold_sequences():
            bare = PatientSequence(seq.patient_id, seq.reports)
            provider = ScriptedProvider.from_exchanges([(*build_grouping_prompt(bare), grouping_answer(seq))])
            assert structure_sequence(provider, bare) == seq

    def test_no_findings_skips_provider(self):
        provider = ScriptedProvider({})
        seq = PatientSequence("p", (report(),))
        assert structure_sequence(provider, seq).entity_groups == ()
        assert provider.calls == 0


class TestProviders:
    def test_http_payload_and_response(self):
        seen = []

        def handler(request):
            seen.append(json.loads(request.content))
            return httpx.Response(200, json={"text": "{}"})

        p = HttpCompletionProvider("http://llm", "m1", client=httpx.Client(transport=httpx.MockTransport(handler)))
        assert p.complete("sys", "usr") == "{}"
        assert seen == [{"system": "sys", "user": "usr", "temperature": 0.0, "max_tokens": 4096, "model": "m1"}]

    def test_http_retries_then_fails(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(429)

        p = HttpCompletionProvider("http://llm", max_retries=2, sleep=lambda s: None,
                                   client=httpx.Client(transport=httpx.MockTransport(handler)))
        with pytest.raises(ProviderUnavailable):
            p.complete("s", "u")
        assert len(calls) == 3 and p.retries == 2

    def test_http_connection_refused(self):
        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        p = HttpCompletionProvider("http://llm", max_retries=1, sleep=lambda s: None,
                                   client=httpx.Client(transport=httpx.MockTransport(handler)))
        with pytest.raises(ProviderUnavailable):
            p.complete("s", "u")

    def test_rate_limiter(self):
        now = [0.0]
        sleeps = []

        def sleep(d):
            sleeps.append(d)
            now[0] += d

        lim = RateLimiter(rate=2.0, burst=2, clock=lambda: now[0], sleep=sleep)
        for _ in range(4):
            lim.acquire()
        assert sleeps == [pytest.approx(0.5), pytest.approx(0.5)]

    def test_rate_limiter_validation(self):
        with pytest.raises(ValueError):
            RateLimiter(0)

    def test_scripted_file_formats(self, tmp_path):
        listed = tmp_path / "list.json"
        listed.write_text(json.dumps([{"system": "s", "user": "u", "response": "r"}]))
        assert ScriptedProvider.from_file(listed).complete("s", "u") == "r"
        p = ScriptedProvider({})
        p.add("s", "u", "r2")
        p.save(tmp_path / "h.json")
        assert ScriptedProvider.from_file(tmp_path / "h.json").complete("s", "u") == "r2"

    def test_env(self):
        assert completion_from_env({}) is None
        p = completion_from_env({"LUNGUAGE_LLM_URL": "http://x", "LUNGUAGE_LLM_MODEL": "m"})
        assert p.model == "m" and p._url() == "http://x/complete"


class TestPipeline:
    def test_end_to_end_reproduces_fixtures(self):
        vocab = load_vocabulary(FIXTURES / "vocab.tsv")
        provider = ScriptedProvider.from_file(FIXTURES / "transcript.json")
        structurer = ReportStructurer(provider, vocab).fit([])
        for seq in gold_sequences():
            studies = [(r.study_id, r.study_day, dict(r.source_text)) for r in seq.reports]
            assert structurer.structure_patient(seq.patient_id, studies) == seq

    def test_fixture_repair_is_recorded(self):
        vocab = load_vocabulary(FIXTURES / "vocab.tsv")
        provider = ScriptedProvider.from_file(FIXTURES / "transcript.json")
        first = gold_sequences()[0].reports[0]
        transcript = []
        got = ReportStructurer(provider, vocab).fit([]).structure_report(
            dict(first.source_text), first.study_id, first.study_day, transcript
        )
        assert got == first
        assert [x.error is not None for x in transcript] == [True, False]

    def test_parallel_matches_serial(self):
        vocab = load_vocabulary(FIXTURES / "vocab.tsv")
        texts = [dict(r.source_text) for s in gold_sequences() for r in s.reports][1:]
        serial = ReportStructurer(ScriptedProvider.from_file(FIXTURES / "transcript.json"), vocab).fit([])
        parallel = ReportStructurer(ScriptedProvider.from_file(FIXTURES / "transcript.json"), vocab, n_jobs=4).fit([])
        assert serial.transform(texts) == parallel.transform(texts)

    def test_needs_provider(self):
        with pytest.raises(ValueError):
            ReportStructurer().fit([])
