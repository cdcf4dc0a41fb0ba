"""Task vocabulary and exact span matching.

Every sentence is tokenized on whitespace and every contiguous word span is
looked up verbatim (no lowercasing, no punctuation stripping). Overlapping
hits are all kept; a surface form registered under several categories
yields one match per category.
"""

from __future__ import annotations

import csv
import json
import os
import re
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "VocabularyEntry",
    "Vocabulary",
    "SpanMatch",
    "load_vocabulary",
    "split_sentences",
    "tokenize_with_offsets",
    "match_spans",
    "SpanMatcher",
]


@dataclass(frozen=True)
class VocabularyEntry:
    surface_form: str
    categories: tuple[str, ...]
    normalized_form: str | None = None
    taxonomy_path: tuple[str, ...] | None = None
    umls_code: str | None = None

    def __post_init__(self):
        if not self.surface_form:
            raise ValueError("surface_form must be non-empty")
        if not self.categories:
            raise ValueError(f"{self.surface_form!r}: categories must be non-empty")


class Vocabulary(Mapping):
    """Case-sensitive multimap from surface form to category labels.

    Registering a surface form twice merges its categories (first-seen
    order, duplicates dropped) instead of raising.
    """

    def __init__(self, entries: Iterable[VocabularyEntry] = ()):
        self._lookup: dict[str, list[str]] = {}
        self._entries: dict[str, VocabularyEntry] = {}
        self.max_words = 0
        for e in entries:
            self.add(e)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable[str] | str]) -> "Vocabulary":
        entries = []
        for surface, cats in mapping.items():
            cats = (cats,) if isinstance(cats, str) else tuple(cats)
            entries.append(VocabularyEntry(surface, cats))
        return cls(entries)

    def add(self, entry: VocabularyEntry) -> None:
        cats = self._lookup.setdefault(entry.surface_form, [])
        for c in entry.categories:
            if c not in cats:
                cats.append(c)
        prev = self._entries.get(entry.surface_form)
        if prev is None or (prev.normalized_form is None and entry.normalized_form is not None):
            self._entries[entry.surface_form] = entry
        self.max_words = max(self.max_words, len(entry.surface_form.split()))

    def entry(self, surface_form: str) -> VocabularyEntry:
        e = self._entries[surface_form]
        return VocabularyEntry(
            surface_form, tuple(self._lookup[surface_form]), e.normalized_form, e.taxonomy_path, e.umls_code
        )

    def __getitem__(self, surface_form: str) -> tuple[str, ...]:
        return tuple(self._lookup[surface_form])

    def __iter__(self):
        return iter(self._lookup)

    def __len__(self):
        return len(self._lookup)

    def __repr__(self):
        return f"Vocabulary({len(self)} terms)"


def load_vocabulary(path: str | os.PathLike) -> Vocabulary:
    """Read a vocabulary file.

    JSON: ``{"surface form": ["Category", ...], ...}``; a bare string value is
    accepted as a single category. Any other suffix is read as TSV with
    columns ``surface<TAB>category[<TAB>normalized]``; lines starting with
    ``#`` are comments. An empty file gives an empty vocabulary.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return Vocabulary()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: vocabulary JSON must be an object")
        return Vocabulary.from_mapping(data)
    entries = []
    for row in csv.reader(text.splitlines(), delimiter="\t"):
        if not row or not row[0].strip() or row[0].startswith("#"):
            continue
        if len(row) < 2:
            raise ValueError(f"{path}: TSV rows need at least surface and category: {row!r}")
        normalized = row[2] if len(row) > 2 and row[2] else None
        entries.append(VocabularyEntry(row[0], (row[1],), normalized))
    return Vocabulary(entries)


_SENTENCE_BREAK = re.compile(r"(?<=\.)\s+(?=[A-Z])")


def split_sentences(text: str) -> list[str]:
    """Split after a period followed by whitespace and an uppercase letter.

    Periods stay attached to their sentence.
    """
    return [s.strip() for s in _SENTENCE_BREAK.split(text) if s.strip()]


_WORD = re.compile(r"\S+")


def tokenize_with_offsets(sentence: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _WORD.finditer(sentence)]


@dataclass(frozen=True, order=True)
class SpanMatch:
    sent_idx: int
    char_start: int
    char_end: int
    text: str
    matched_term: str
    category: str


def _match_sentence(lookup: Mapping[str, Iterable[str]], sentence: str, sent_idx: int, max_words: int):
    words = tokenize_with_offsets(sentence)
    n = len(words)
    out = []
    for length in range(min(n, max_words) if max_words else n, 0, -1):
        for i in range(n - length + 1):
            start, end = words[i][1], words[i + length - 1][2]
            # the lookup key joins words with single spaces, so a span with
            # doubled whitespace inside still matches the canonical form
            key = " ".join(w for w, _, _ in words[i : i + length])
            cats = lookup.get(key)
            if not cats:
                continue
            for cat in sorted(set(cats)):
                out.append(SpanMatch(sent_idx, start, end, sentence[start:end], key, cat))
    return out


def match_spans(
    vocab: Mapping[str, Iterable[str]],
    section_text: str | list[str],
    splitter: Callable[[str], list[str]] = split_sentences,
) -> list[SpanMatch]:
    """Find every vocabulary term in a report section.

    ``section_text`` is either raw text (split with ``splitter``) or a list
    of pre-split sentences. Sentence indices are 1-based; character offsets
    are relative to the sentence. Output is ordered per sentence by
    descending span length, then start offset, then category.
    """
    sentences = splitter(section_text) if isinstance(section_text, str) else list(section_text)
    max_words = getattr(vocab, "max_words", 0)
    out = []
    for s_i, sentence in enumerate(sentences, start=1):
        out.extend(_match_sentence(vocab, sentence, s_i, max_words))
    return out


class SpanMatcher(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`match_spans`.

    ``fit`` takes a :class:`Vocabulary`, a mapping, or a path to a
    vocabulary file; ``transform`` maps a list of section texts to a list
    of match lists.
    """

    def __init__(self, splitter: Callable[[str], list[str]] = split_sentences):
        self.splitter = splitter

    def fit(self, X, y=None):
        if isinstance(X, (str, os.PathLike)):
            X = load_vocabulary(X)
        elif not isinstance(X, Vocabulary):
            X = Vocabulary.from_mapping(X)
        self.vocabulary_ = X
        return self

    def transform(self, X):
        check_is_fitted(self, "vocabulary_")
        if isinstance(X, str):
            raise TypeError("transform expects a list of texts, got a single string")
        return [match_spans(self.vocabulary_, text, self.splitter) for text in X]
