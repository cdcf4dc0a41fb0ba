"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (enumeration, plain loops, no numpy)
and shares no code with the package under test.
"""

from __future__ import annotations

import math
from fractions import Fraction


def partial_matchings(n_rows: int, n_cols: int):
    """Yield every one-to-one partial matching as a sorted list of pairs."""

    def rec(i, used):
        if i == n_rows:
            yield []
            return
        yield from rec(i + 1, used)
        for j in range(n_cols):
            if j not in used:
                for rest in rec(i + 1, used | {j}):
                    yield [(i, j)] + rest

    yield from rec(0, frozenset())


def best_matching(matrix, threshold=0.0, shape=None):
    """Maximum total over partial matchings that use only cells above
    ``threshold``; ties go to the lexicographically smallest pair list.

    Values are compared as exact rationals so ties are real ties.
    """
    n, m = shape or (len(matrix), len(matrix[0]) if matrix else 0)
    best_val, best_pairs = Fraction(0), []
    for pairs in partial_matchings(n, m):
        if any(matrix[r][c] <= threshold for r, c in pairs):
            continue
        val = sum((Fraction(matrix[r][c]) for r, c in pairs), Fraction(0))
        if val > best_val or (val == best_val and pairs < best_pairs):
            best_val, best_pairs = val, pairs
    return best_val, best_pairs


def partial_credit(matrix, pairs, shape=None):
    """TP, FP, FN with plain loops; pass ``shape`` when a side is empty."""
    n, m = shape or (len(matrix), len(matrix[0]) if matrix else 0)
    rows = {r for r, _ in pairs}
    cols = {c for _, c in pairs}
    tp = fp = fn = 0.0
    for r, c in pairs:
        tp += matrix[r][c]
        fp += 1 - matrix[r][c]
        fn += 1 - matrix[r][c]
    for r in range(n):
        if r not in rows:
            fp += 1 - max([matrix[r][c] for c in range(m)], default=0.0)
    for c in range(m):
        if c not in cols:
            fn += 1 - max([matrix[r][c] for r in range(n)], default=0.0)
    return tp, fp, fn


def all_substring_matches(vocab: dict, sentence: str):
    """Every contiguous run of whitespace-separated words found in ``vocab``.

    Returns a set of ``(char_start, char_end, text, category)``.
    """
    words = []
    pos = 0
    for w in sentence.split():
        start = sentence.index(w, pos)
        words.append((w, start, start + len(w)))
        pos = start + len(w)
    out = set()
    for i in range(len(words)):
        for j in range(i, len(words)):
            key = " ".join(w for w, _, _ in words[i : j + 1])
            for cat in vocab.get(key, ()):
                start, end = words[i][1], words[j][2]
                out.add((start, end, sentence[start:end], cat))
    return out


def bm25_scores(corpus: list[str], query: str, k1=1.2, b=0.75):
    """Okapi BM25 of every document for ``query`` (lowercased whitespace tokens)."""
    docs = [d.lower().split() for d in corpus]
    n_docs = len(docs)
    avgdl = sum(len(d) for d in docs) / n_docs if n_docs else 0.0
    scores = []
    for d in docs:
        total = 0.0
        for term in query.lower().split():
            n_t = sum(1 for other in docs if term in other)
            idf = math.log(1 + (n_docs - n_t + 0.5) / (n_t + 0.5))
            tf = d.count(term)
            norm = tf + k1 * (1 - b + b * len(d) / avgdl) if avgdl else tf + k1
            total += idf * tf * (k1 + 1) / norm if norm else 0.0
        scores.append(total)
    return scores


def weighted_structural(weights: dict, sims: dict):
    """``sims`` maps attribute name to similarity for every compared kind."""
    num = sum(weights[k] * s for k, s in sims.items())
    den = sum(weights[k] for k in sims)
    return num / den
