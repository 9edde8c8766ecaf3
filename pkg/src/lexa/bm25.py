"""Okapi BM25 over case texts.

Serves three roles: the lexical retrieval baseline, hard-negative mining for
contrastive training, and the first stage of two-stage retrieval. Tokens are
lowercased runs of ASCII alphanumerics; the IDF uses the +1-inside-log
variant so scores stay non-negative.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class Bm25Index:
    doc_ids: list[str]
    term_freqs: dict[str, Counter]
    doc_lengths: dict[str, int]
    doc_freq: Counter
    avgdl: float
    k1: float = 1.2
    b: float = 0.75
    _idf: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        cached = self._idf.get(term)
        if cached is None:
            df = self.doc_freq.get(term, 0)
            cached = math.log((self.size - df + 0.5) / (df + 0.5) + 1.0)
            self._idf[term] = cached
        return cached


def build_index(corpus: dict[str, str], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Index a corpus of id -> text. Empty corpus is an error."""
    if not corpus:
        raise ValueError("bm25: empty corpus")
    term_freqs = {}
    doc_lengths = {}
    doc_freq = Counter()
    for doc_id, text in corpus.items():
        tokens = tokenize(text)
        tf = Counter(tokens)
        term_freqs[doc_id] = tf
        doc_lengths[doc_id] = len(tokens)
        for term in tf:
            doc_freq[term] += 1
    avgdl = sum(doc_lengths.values()) / len(doc_lengths)
    return Bm25Index(doc_ids=list(corpus.keys()), term_freqs=term_freqs,
                     doc_lengths=doc_lengths, doc_freq=doc_freq, avgdl=avgdl, k1=k1, b=b)


def score(index: Bm25Index, query_text: str, doc_id: str) -> float:
    """Okapi BM25 score of one document for a query."""
    tf = index.term_freqs.get(doc_id)
    if tf is None:
        raise KeyError(f"bm25: unknown document id '{doc_id}'")
    length_norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[doc_id] / index.avgdl)
    total = 0.0
    for term in tokenize(query_text):
        freq = tf.get(term)
        if not freq:
            continue
        total += index.idf(term) * freq * (index.k1 + 1.0) / (freq + length_norm)
    return total


def top_k(index: Bm25Index, query_text: str, k: int, exclude=frozenset()) -> list[str]:
    """Highest-scoring document ids, ties broken by id ascending."""
    scored = [(-score(index, query_text, doc_id), doc_id)
              for doc_id in index.doc_ids if doc_id not in exclude]
    scored.sort()
    return [doc_id for _, doc_id in scored[:k]]
