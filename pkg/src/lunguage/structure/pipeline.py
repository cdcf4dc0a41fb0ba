"""Estimator wrapper around the two structuring stages."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..model import PatientSequence, StructuredReport
from ..vocab import Vocabulary
from .retrieval import FewShotIndex
from .sequential import structure_sequence
from .single import build_single_prompt, structure_single


class ReportStructurer(TransformerMixin, BaseEstimator):
    """Turn free-text reports into structured reports and patient sequences.

    ``fit`` takes the few-shot corpus as ``(report text, gold report)``
    pairs (it may be empty for zero-shot use). ``transform`` structures a
    list of report texts, each a string or a ``{section: text}`` mapping.
    """

    def __init__(self, provider=None, vocabulary: Vocabulary | Mapping | None = None, k_shots: int = 0,
                 max_repairs: int = 2, max_example_tokens: int | None = None, temperature: float = 0.0,
                 max_tokens: int = 4096, n_jobs: int = 1):
        self.provider = provider
        self.vocabulary = vocabulary
        self.k_shots = k_shots
        self.max_repairs = max_repairs
        self.max_example_tokens = max_example_tokens
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.n_jobs = n_jobs

    def fit(self, X: Sequence[tuple[str, StructuredReport]] = (), y=None):
        if self.provider is None:
            raise ValueError("ReportStructurer needs a completion provider")
        self.index_ = FewShotIndex(list(X))
        return self

    def _decoding(self):
        return {"temperature": self.temperature, "max_tokens": self.max_tokens}

    def prompt(self, report_text) -> tuple[str, str]:
        check_is_fitted(self, "index_")
        return build_single_prompt(report_text, self.vocabulary, self.index_, self.k_shots, self.max_example_tokens)

    def structure_report(self, report_text, study_id: str = "s0", study_day: int = 0,
                         transcript: list | None = None) -> StructuredReport:
        source = {"findings": report_text} if isinstance(report_text, str) else dict(report_text)
        return structure_single(self.provider, self.prompt(report_text), self.max_repairs, study_id, study_day,
                                source, transcript, **self._decoding())

    def _map(self, fn, items):
        if self.n_jobs == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.n_jobs if self.n_jobs > 0 else None) as pool:
            return list(pool.map(fn, items))

    def transform(self, X):
        """Structure each text; study ids are ``s<position>``, days 0."""
        items = list(enumerate(X))
        return self._map(lambda it: self.structure_report(it[1], f"s{it[0]}", 0), items)

    def structure_patient(self, patient_id: str, studies: Sequence[tuple[str, int, object]],
                          transcript: list | None = None) -> PatientSequence:
        """Structure ``(study_id, study_day, text)`` triples and group them."""
        reports = self._map(lambda s: self.structure_report(s[2], s[0], s[1]), list(studies))
        seq = PatientSequence(patient_id, tuple(reports))
        return structure_sequence(self.provider, seq, self.max_repairs, transcript, **self._decoding())
