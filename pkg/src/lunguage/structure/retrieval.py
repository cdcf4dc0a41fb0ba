"""Okapi BM25 retrieval of few-shot examples."""

from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, Sequence

from ..model import Section, StructuredReport

_SECTION_ORDER = {s.value: i for i, s in enumerate(Section)}


def document_text(doc: str | Mapping[str, str]) -> str:
    """Plain text of a report given as a string or a ``{section: text}`` map."""
    if isinstance(doc, str):
        return doc
    return " ".join(text for _, text in sorted(doc.items(), key=lambda kv: _SECTION_ORDER.get(kv[0], len(_SECTION_ORDER))))


def bm25_tokenize(text: str | Mapping[str, str]) -> list[str]:
    return document_text(text).lower().split()


class FewShotIndex:
    """BM25 index over ``(report text, gold report)`` pairs.

    Report texts may be strings or ``{section: text}`` mappings.

    Scores use ``idf = log(1 + (N - n + 0.5) / (n + 0.5))`` and the usual
    length-normalized term-frequency saturation. Repeated query tokens
    count once per occurrence.
    """

    def __init__(self, corpus: Sequence[tuple[str, StructuredReport]], k1: float = 1.2, b: float = 0.75):
        self.corpus = list(corpus)
        self.k1 = k1
        self.b = b
        self._tfs = [Counter(bm25_tokenize(text)) for text, _ in self.corpus]
        self._lens = [sum(tf.values()) for tf in self._tfs]
        n_docs = len(self.corpus)
        self.avgdl = sum(self._lens) / n_docs if n_docs else 0.0
        df: Counter = Counter()
        for tf in self._tfs:
            df.update(tf.keys())
        self.idf = {t: math.log(1 + (n_docs - n + 0.5) / (n + 0.5)) for t, n in df.items()}

    def __len__(self):
        return len(self.corpus)

    def scores(self, query: str) -> list[float]:
        q = bm25_tokenize(query)
        out = []
        for tf, dl in zip(self._tfs, self._lens):
            norm = self.k1 * (1 - self.b + self.b * dl / self.avgdl) if self.avgdl else self.k1
            s = 0.0
            for t in q:
                f = tf.get(t, 0)
                if f:
                    s += self.idf[t] * f * (self.k1 + 1) / (f + norm)
            out.append(s)
        return out

    def retrieve(self, query: str, k: int) -> list[int]:
        """Indices of the ``k`` best documents; ties keep corpus order."""
        if k <= 0:
            return []
        s = self.scores(query)
        return sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
