"""BM25 over raw passage text, as a non-learned stand-in for the association
channel. Scores are min-max normalized within each candidate pool before
blending so they share the dense similarity's scale."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from assocrank.rerank import RankedCandidate, RerankConfig, blend_and_rerank
from assocrank.search import CandidatePool

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class LexicalIndex:
    k1: float = 1.2
    b: float = 0.75
    term_freqs: dict[str, Counter] = field(default_factory=dict)
    doc_lens: dict[str, int] = field(default_factory=dict)
    doc_freqs: Counter = field(default_factory=Counter)
    avg_len: float = 0.0

    @property
    def n_docs(self) -> int:
        return len(self.doc_lens)


def build_lexical_index(passages: dict[str, str], k1: float = 1.2, b: float = 0.75) -> LexicalIndex:
    if not passages:
        raise ValueError("empty passage collection")
    index = LexicalIndex(k1=k1, b=b)
    total = 0
    for pid, text in passages.items():
        tokens = tokenize(text)
        index.term_freqs[pid] = Counter(tokens)
        index.doc_lens[pid] = len(tokens)
        total += len(tokens)
        for term in set(tokens):
            index.doc_freqs[term] += 1
    index.avg_len = total / len(passages)
    return index


def bm25_score(query_text: str, passage_id: str, index: LexicalIndex) -> float:
    """Okapi BM25 with the IDF clamped at zero, summed over query tokens
    (with multiplicity)."""
    if passage_id not in index.term_freqs:
        raise KeyError(f"unknown passage id {passage_id!r}")
    tf = index.term_freqs[passage_id]
    dl = index.doc_lens[passage_id]
    n = index.n_docs
    avg = index.avg_len if index.avg_len > 0 else 1.0
    score = 0.0
    for term in tokenize(query_text):
        if term not in tf:
            continue
        df = index.doc_freqs[term]
        idf = max(0.0, math.log((n - df + 0.5) / (df + 0.5)))
        freq = tf[term]
        score += idf * freq * (index.k1 + 1.0) / (freq + index.k1 * (1.0 - index.b + index.b * dl / avg))
    return score


def bm25_rerank(
    pool: CandidatePool,
    query_text: str,
    index: LexicalIndex,
    ids: list[str],
    blend_lambda: float,
    cutoff: int,
) -> list[RankedCandidate]:
    """Blend pool-normalized BM25 into the dense ranking.

    `ids` maps passage rows to the string ids the index is keyed by. A pool
    whose BM25 scores are all equal normalizes to zeros, collapsing to the
    dense order.
    """
    raw = np.array(
        [bm25_score(query_text, ids[c.passage_row], index) for c in pool.candidates],
        dtype=np.float64,
    )
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        norm = (raw - lo) / (hi - lo)
    else:
        norm = np.zeros_like(raw)
    config = RerankConfig(
        blend_lambda=blend_lambda, pool_depth=len(pool), cutoff=cutoff, mode="mixed_bidi"
    )
    return blend_and_rerank(pool, norm.astype(np.float32), config)
