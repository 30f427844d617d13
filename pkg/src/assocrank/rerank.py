"""Blend dense similarity with learned association scores over a candidate pool.

Scoring modes, all built from the transform f:

    forward_only      f(q) . p
    reverse_only      f(p) . q
    both_transformed  f(q) . f(p)
    mixed_bidi        0.5 * (f(q) . p  +  f(p) . q)

The passage-side transform comes from a precomputed TransformedMatrix, so a
query costs one forward pass plus K dot products per direction. The final
ranking orders candidates by (1 - lambda) * sim + lambda * assoc with ties
broken toward the lower passage row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from assocrank.embeddings import EmbeddingMatrix
from assocrank.model import AssocModel, TransformedMatrix, forward
from assocrank.search import CandidatePool, top_k

SCORING_MODES = ("forward_only", "reverse_only", "both_transformed", "mixed_bidi")


@dataclass
class RerankConfig:
    blend_lambda: float = 0.50
    pool_depth: int = 100
    cutoff: int = 5
    mode: str = "mixed_bidi"

    def validate(self) -> None:
        if not 0.0 <= self.blend_lambda <= 1.0:
            raise ValueError(f"blend_lambda must be in [0, 1], got {self.blend_lambda}")
        if self.pool_depth < 1:
            raise ValueError(f"pool_depth must be >= 1, got {self.pool_depth}")
        if not 1 <= self.cutoff <= self.pool_depth:
            raise ValueError(
                f"cutoff must be in [1, pool_depth={self.pool_depth}], got {self.cutoff}"
            )
        if self.mode not in SCORING_MODES:
            raise ValueError(f"mode must be one of {SCORING_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class RankedCandidate:
    passage_row: int
    sim: float
    assoc: float
    blended: float


@dataclass
class RerankResult:
    query_id: str
    entries: list[RankedCandidate]

    def to_json_dict(self, ids: list[str]) -> dict:
        return {
            "query_id": self.query_id,
            "ranking": [
                {
                    "passage_id": ids[e.passage_row],
                    "sim": e.sim,
                    "assoc": e.assoc,
                    "blended": e.blended,
                }
                for e in self.entries
            ],
        }


@dataclass
class ScoredPool:
    """A candidate pool with both score channels attached, dense order."""

    query_id: str
    rows: np.ndarray
    sims: np.ndarray
    assocs: np.ndarray


def _assoc_from_parts(
    query: np.ndarray,
    fq: np.ndarray,
    pool_vecs: np.ndarray,
    pool_transformed: np.ndarray,
    mode: str,
) -> np.ndarray:
    if mode == "forward_only":
        return pool_vecs @ fq
    if mode == "reverse_only":
        return pool_transformed @ query
    if mode == "both_transformed":
        return pool_transformed @ fq
    if mode == "mixed_bidi":
        return 0.5 * (pool_vecs @ fq + pool_transformed @ query)
    raise ValueError(f"mode must be one of {SCORING_MODES}, got {mode!r}")


def association_score(
    model: AssocModel,
    query: np.ndarray,
    passage: np.ndarray,
    passage_transformed: np.ndarray,
    mode: str = "mixed_bidi",
) -> float:
    """Association score of one (query, passage) pair under a scoring mode."""
    q = np.asarray(query, dtype=model.dtype)
    fq = forward(model, q, degenerate="zero")
    out = _assoc_from_parts(
        q, fq, np.asarray(passage, dtype=model.dtype)[None, :],
        np.asarray(passage_transformed, dtype=model.dtype)[None, :], mode,
    )
    return float(out[0])


def blend_and_rerank(
    pool: CandidatePool, assoc_scores: np.ndarray, config: RerankConfig
) -> list[RankedCandidate]:
    """Rescore a pool with (1 - lambda) * sim + lambda * assoc and truncate.

    assoc_scores aligns with the pool's candidate order. Ties in the blended
    score break toward the lower passage row, matching dense retrieval.
    """
    config.validate()
    assoc = np.asarray(assoc_scores, dtype=np.float32)
    if assoc.shape != (len(pool),):
        raise ValueError(f"assoc_scores shape {assoc.shape} does not match pool size {len(pool)}")
    if len(pool) < config.cutoff:
        raise ValueError(f"pool size {len(pool)} is below cutoff {config.cutoff}")
    rows = pool.rows()
    sims = pool.scores()
    lam = config.blend_lambda
    blended = (1.0 - lam) * sims + lam * assoc
    order = np.lexsort((rows, -blended))[: config.cutoff]
    return [
        RankedCandidate(int(rows[i]), float(sims[i]), float(assoc[i]), float(blended[i]))
        for i in order
    ]


def score_pool(
    query_id: str,
    query: np.ndarray,
    passages: EmbeddingMatrix,
    transformed: TransformedMatrix,
    model: AssocModel,
    config: RerankConfig,
) -> ScoredPool:
    """Retrieve a dense pool and attach association scores (dense order)."""
    config.validate()
    if len(transformed.ids) != passages.rows:
        raise ValueError("transformed matrix does not match the passage matrix")
    q = np.asarray(query, dtype=np.float32)
    pool = top_k(q, passages, config.pool_depth, query_id=query_id)
    rows = pool.rows()
    fq = forward(model, q, degenerate="zero")
    assoc = _assoc_from_parts(
        q, fq, passages.data[rows], transformed.data[rows], config.mode
    )
    return ScoredPool(
        query_id=query_id, rows=rows, sims=pool.scores(), assocs=np.asarray(assoc, dtype=np.float32)
    )


def rank_rows(scored: ScoredPool, blend_lambda: float, cutoff: int) -> np.ndarray:
    """Row indices of the blended top-`cutoff`, reusing precomputed scores."""
    blended = (1.0 - blend_lambda) * scored.sims + blend_lambda * scored.assocs
    order = np.lexsort((scored.rows, -blended))[:cutoff]
    return scored.rows[order]


def rerank_query(
    query_id: str,
    query: np.ndarray,
    passages: EmbeddingMatrix,
    transformed: TransformedMatrix,
    model: AssocModel,
    config: RerankConfig,
) -> RerankResult:
    """Full per-query pipeline: dense pool, association scores, blend."""
    scored = score_pool(query_id, query, passages, transformed, model, config)
    lam = config.blend_lambda
    blended = (1.0 - lam) * scored.sims + lam * scored.assocs
    order = np.lexsort((scored.rows, -blended))[: config.cutoff]
    entries = [
        RankedCandidate(
            int(scored.rows[i]),
            float(scored.sims[i]),
            float(scored.assocs[i]),
            float(blended[i]),
        )
        for i in order
    ]
    return RerankResult(query_id=query_id, entries=entries)


class RerankPipeline:
    """Bundles corpus, transform, and config; exposes the timed stages."""

    def __init__(
        self,
        model: AssocModel,
        passages: EmbeddingMatrix,
        transformed: TransformedMatrix,
        config: RerankConfig,
    ):
        config.validate()
        if len(transformed.ids) != passages.rows:
            raise ValueError("transformed matrix does not match the passage matrix")
        self.model = model
        self.passages = passages
        self.transformed = transformed
        self.config = config

    def retrieve(self, query: np.ndarray, query_id: str = "") -> CandidatePool:
        return top_k(query, self.passages, self.config.pool_depth, query_id=query_id)

    def transform_query(self, query: np.ndarray) -> np.ndarray:
        return forward(self.model, query, degenerate="zero")

    def assoc_scores(self, query: np.ndarray, fq: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return _assoc_from_parts(
            query, fq, self.passages.data[rows], self.transformed.data[rows], self.config.mode
        )

    def blend(self, pool: CandidatePool, assoc: np.ndarray) -> list[RankedCandidate]:
        return blend_and_rerank(pool, assoc, self.config)

    def rerank(self, query_id: str, query: np.ndarray) -> RerankResult:
        q = np.asarray(query, dtype=np.float32)
        pool = self.retrieve(q, query_id)
        fq = self.transform_query(q)
        assoc = self.assoc_scores(q, fq, pool.rows())
        return RerankResult(query_id=query_id, entries=self.blend(pool, assoc))
