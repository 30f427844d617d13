"""Blended reranking: modes, blend arithmetic, ordering guarantees."""

import numpy as np
import pytest

from assocrank.embeddings import EmbeddingMatrix, l2_normalize_rows
from assocrank.model import AssocModel, transform_matrix
from assocrank.rerank import (
    SCORING_MODES,
    RerankConfig,
    RerankPipeline,
    association_score,
    blend_and_rerank,
    rank_rows,
    rerank_query,
    score_pool,
)
from assocrank.search import Candidate, CandidatePool, top_k


def pool_of(rows, scores, query_id="q"):
    return CandidatePool(
        query_id=query_id,
        candidates=[Candidate(r, s) for r, s in zip(rows, scores)],
    )


def unit_corpus(rng, n, d, prefix="p"):
    data = rng.normal(size=(n, d)).astype(np.float32)
    m = EmbeddingMatrix(ids=[f"{prefix}{i:04d}" for i in range(n)], data=data)
    return l2_normalize_rows(m)


def pipeline_parts(rng, n=300, d=24, model_seed=0, perturb=True):
    passages = unit_corpus(rng, n, d)
    model = AssocModel.initialize(d, seed=model_seed)
    if perturb:
        model.alpha_raw[:] = -0.7
        for i in range(3):
            model.ln_shifts[i][:] = rng.normal(scale=0.1, size=d).astype(np.float32)
    transformed = transform_matrix(model, passages)
    return passages, model, transformed


class TestConfig:
    def test_defaults(self):
        cfg = RerankConfig()
        assert cfg.blend_lambda == 0.50
        assert cfg.pool_depth == 100
        assert cfg.cutoff == 5
        assert cfg.mode == "mixed_bidi"
        cfg.validate()

    def test_validation(self):
        with pytest.raises(ValueError, match="blend_lambda"):
            RerankConfig(blend_lambda=1.2).validate()
        with pytest.raises(ValueError, match="blend_lambda"):
            RerankConfig(blend_lambda=-0.1).validate()
        with pytest.raises(ValueError, match="pool_depth"):
            RerankConfig(pool_depth=0).validate()
        with pytest.raises(ValueError, match="cutoff"):
            RerankConfig(pool_depth=10, cutoff=11).validate()
        with pytest.raises(ValueError, match="cutoff"):
            RerankConfig(cutoff=0).validate()
        with pytest.raises(ValueError, match="mode"):
            RerankConfig(mode="backward_only").validate()


class TestBlend:
    def test_three_candidate_hand_example(self):
        pool = pool_of([0, 1, 2], [0.9, 0.5, 0.4])
        assoc = np.array([0.1, 0.9, 0.8], dtype=np.float32)
        cfg = RerankConfig(blend_lambda=0.6, pool_depth=3, cutoff=3)
        entries = blend_and_rerank(pool, assoc, cfg)
        assert [e.passage_row for e in entries] == [1, 2, 0]
        got = np.array([e.blended for e in entries])
        assert np.abs(got - np.array([0.74, 0.64, 0.42])).max() < 1e-6

    def test_lambda_zero_keeps_dense_order_exactly(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n = int(rng.integers(5, 40))
            sims = np.sort(rng.normal(size=n).astype(np.float32))[::-1]
            if trial % 2:
                sims[: n // 2] = sims[0]  # duplicated leading scores
                sims = np.sort(sims)[::-1]
            rows = np.arange(n)
            pool = pool_of(rows.tolist(), sims.tolist())
            assoc = rng.normal(size=n).astype(np.float32)
            cfg = RerankConfig(blend_lambda=0.0, pool_depth=n, cutoff=n)
            entries = blend_and_rerank(pool, assoc, cfg)
            assert [e.passage_row for e in entries] == rows.tolist()
            assert [e.blended for e in entries] == sims.tolist()

    def test_lambda_one_sorts_by_association(self):
        rng = np.random.default_rng(1)
        n = 30
        pool = pool_of(list(range(n)), np.sort(rng.normal(size=n))[::-1].tolist())
        assoc = rng.normal(size=n).astype(np.float32)
        cfg = RerankConfig(blend_lambda=1.0, pool_depth=n, cutoff=n)
        entries = blend_and_rerank(pool, assoc, cfg)
        expected = sorted(range(n), key=lambda i: (-assoc[i], i))
        assert [e.passage_row for e in entries] == expected

    def test_blended_ties_break_toward_lower_row(self):
        pool = pool_of([30, 10], [0.5, 0.5])
        assoc = np.array([0.2, 0.2], dtype=np.float32)
        cfg = RerankConfig(blend_lambda=0.5, pool_depth=2, cutoff=2)
        entries = blend_and_rerank(pool, assoc, cfg)
        assert [e.passage_row for e in entries] == [10, 30]

    def test_cutoff_truncates(self):
        pool = pool_of([0, 1, 2, 3], [0.9, 0.8, 0.7, 0.6])
        assoc = np.zeros(4, dtype=np.float32)
        cfg = RerankConfig(blend_lambda=0.0, pool_depth=4, cutoff=2)
        assert len(blend_and_rerank(pool, assoc, cfg)) == 2

    def test_assoc_shape_must_match_pool(self):
        pool = pool_of([0, 1], [0.9, 0.8])
        cfg = RerankConfig(pool_depth=2, cutoff=1)
        with pytest.raises(ValueError, match="does not match pool size"):
            blend_and_rerank(pool, np.zeros(3, dtype=np.float32), cfg)

    def test_pool_below_cutoff(self):
        pool = pool_of([0, 1], [0.9, 0.8])
        cfg = RerankConfig(pool_depth=10, cutoff=5)
        with pytest.raises(ValueError, match="below cutoff"):
            blend_and_rerank(pool, np.zeros(2, dtype=np.float32), cfg)


class TestModes:
    def test_mixed_is_mean_of_directed_modes(self):
        rng = np.random.default_rng(2)
        passages, model, transformed = pipeline_parts(rng)
        q = rng.normal(size=24).astype(np.float32)
        q /= np.linalg.norm(q)
        for row in (0, 7, 131):
            parts = {
                mode: association_score(
                    model, q, passages.data[row], transformed.data[row], mode
                )
                for mode in SCORING_MODES
            }
            mean = 0.5 * (parts["forward_only"] + parts["reverse_only"])
            assert abs(parts["mixed_bidi"] - mean) < 1e-6

    def test_modes_collapse_under_saturated_gate(self):
        # alpha_raw = 20 makes f plain normalization, so all modes agree with
        # the raw inner product on unit inputs
        rng = np.random.default_rng(3)
        passages, model, transformed = pipeline_parts(rng, perturb=False)
        model.alpha_raw[:] = 20.0
        transformed = transform_matrix(model, passages)
        q = rng.normal(size=24).astype(np.float32)
        q /= np.linalg.norm(q)
        for row in (1, 44, 200):
            raw = float(passages.data[row] @ q)
            for mode in SCORING_MODES:
                got = association_score(
                    model, q, passages.data[row], transformed.data[row], mode
                )
                assert abs(got - raw) < 1e-5

    def test_unknown_mode_rejected(self):
        rng = np.random.default_rng(4)
        passages, model, transformed = pipeline_parts(rng, n=10)
        with pytest.raises(ValueError, match="mode must be"):
            association_score(model, passages.data[0], passages.data[1],
                              transformed.data[1], "sideways")


class TestScorePool:
    def test_assocs_match_single_pair_scoring(self):
        rng = np.random.default_rng(5)
        passages, model, transformed = pipeline_parts(rng)
        q = rng.normal(size=24).astype(np.float32)
        cfg = RerankConfig(pool_depth=20, cutoff=5)
        scored = score_pool("q0", q, passages, transformed, model, cfg)
        assert scored.rows.shape == (20,)
        for slot in (0, 3, 19):
            row = int(scored.rows[slot])
            single = association_score(
                model, q, passages.data[row], transformed.data[row], cfg.mode
            )
            assert abs(single - float(scored.assocs[slot])) < 1e-6

    def test_sims_match_dense_pool(self):
        rng = np.random.default_rng(6)
        passages, model, transformed = pipeline_parts(rng)
        q = rng.normal(size=24).astype(np.float32)
        cfg = RerankConfig(pool_depth=15, cutoff=5)
        scored = score_pool("q0", q, passages, transformed, model, cfg)
        dense = top_k(q, passages, 15)
        assert scored.rows.tolist() == dense.rows().tolist()
        assert scored.sims.tolist() == dense.scores().tolist()

    def test_transformed_must_match(self):
        rng = np.random.default_rng(7)
        passages, model, transformed = pipeline_parts(rng, n=10)
        transformed.ids = transformed.ids[:-1]
        with pytest.raises(ValueError, match="does not match"):
            score_pool("q", passages.data[0], passages, transformed, model, RerankConfig(pool_depth=5, cutoff=2))


class TestRerankQuery:
    def test_pool_containment_and_cutoff(self):
        rng = np.random.default_rng(8)
        passages, model, transformed = pipeline_parts(rng)
        cfg = RerankConfig(pool_depth=40, cutoff=7)
        for _ in range(10):
            q = rng.normal(size=24).astype(np.float32)
            result = rerank_query("q", q, passages, transformed, model, cfg)
            assert len(result.entries) == 7
            dense_rows = set(top_k(q, passages, 40).rows().tolist())
            assert {e.passage_row for e in result.entries} <= dense_rows

    def test_noop_guarantee_under_saturated_gate(self):
        rng = np.random.default_rng(9)
        passages, model, transformed = pipeline_parts(rng, n=400, d=32, perturb=False)
        model.alpha_raw[:] = 20.0
        transformed = transform_matrix(model, passages)
        queries = unit_corpus(rng, 12, 32, prefix="q")
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
            for mode in SCORING_MODES:
                cfg = RerankConfig(blend_lambda=lam, pool_depth=50, cutoff=10, mode=mode)
                for qi in range(queries.rows):
                    q = queries.data[qi]
                    got = rerank_query("q", q, passages, transformed, model, cfg)
                    dense = top_k(q, passages, 50).rows()[:10]
                    assert [e.passage_row for e in got.entries] == dense.tolist()

    def test_rank_rows_agrees_with_full_result(self):
        rng = np.random.default_rng(10)
        passages, model, transformed = pipeline_parts(rng)
        cfg = RerankConfig(blend_lambda=0.3, pool_depth=25, cutoff=6)
        q = rng.normal(size=24).astype(np.float32)
        scored = score_pool("q", q, passages, transformed, model, cfg)
        rows = rank_rows(scored, 0.3, 6)
        full = rerank_query("q", q, passages, transformed, model, cfg)
        assert rows.tolist() == [e.passage_row for e in full.entries]

    def test_json_shape_uses_ids(self):
        rng = np.random.default_rng(11)
        passages, model, transformed = pipeline_parts(rng, n=20)
        cfg = RerankConfig(pool_depth=5, cutoff=2)
        result = rerank_query("q7", passages.data[3], passages, transformed, model, cfg)
        payload = result.to_json_dict(passages.ids)
        assert payload["query_id"] == "q7"
        assert len(payload["ranking"]) == 2
        first = payload["ranking"][0]
        assert set(first) == {"passage_id", "sim", "assoc", "blended"}
        assert first["passage_id"].startswith("p")


class TestPipeline:
    def test_stagewise_equals_one_shot(self):
        rng = np.random.default_rng(12)
        passages, model, transformed = pipeline_parts(rng)
        cfg = RerankConfig(pool_depth=30, cutoff=5)
        pipe = RerankPipeline(model, passages, transformed, cfg)
        q = rng.normal(size=24).astype(np.float32)
        pool = pipe.retrieve(q, "q1")
        fq = pipe.transform_query(q)
        assoc = pipe.assoc_scores(q, fq, pool.rows())
        entries = pipe.blend(pool, assoc)
        one_shot = pipe.rerank("q1", q)
        assert [e.passage_row for e in entries] == [e.passage_row for e in one_shot.entries]

    def test_mismatched_transform_rejected(self):
        rng = np.random.default_rng(13)
        passages, model, transformed = pipeline_parts(rng, n=10)
        transformed.ids = transformed.ids[:-1]
        with pytest.raises(ValueError, match="does not match"):
            RerankPipeline(model, passages, transformed, RerankConfig(pool_depth=5, cutoff=2))
