import numpy as np
import pytest

from hybrid_retrieval.bench import SyntheticSpec, query_embedding_near, random_clauses, random_queries
from hybrid_retrieval.pipeline import (
    BatchItemError,
    Executor,
    HybridQuery,
    QueryOptions,
    execute,
    execute_batch,
    make_query,
    merge_messengers,
)
from hybrid_retrieval.term_match import CNFQuery, QueryError

from oracles import brute_force, slot_clauses

SPEC = SyntheticSpec(num_docs=3000, dim=16, num_bits=128, seed=7)


def test_match_all_two_docs(two_doc_index):
    res = execute(two_doc_index, make_query(two_doc_index, {}, [1.0, 0.0], k=2))
    assert res.doc_ids == ("doc1", "doc2")
    assert res.scores[0] > res.scores[1]


def test_term_only_query(two_doc_index):
    res = execute(two_doc_index, make_query(two_doc_index, {"geo": [129, 934]}, None, k=1))
    assert res.row_ids.tolist() == [0]
    assert res.scores.tolist() == [0.0]


def test_zero_matches_is_empty(two_doc_index):
    res = execute(two_doc_index, make_query(two_doc_index, {"geo": [5]}, [1.0, 0.0]))
    assert len(res) == 0


def test_make_query_rejects(two_doc_index):
    with pytest.raises(QueryError, match="expected dim 2"):
        make_query(two_doc_index, {}, [1.0, 0.0, 0.0])
    with pytest.raises(QueryError, match="k must"):
        make_query(two_doc_index, {}, [1.0, 0.0], k=0)
    with pytest.raises(QueryError, match="unknown clause"):
        make_query(two_doc_index, {"title": [1]}, [1.0, 0.0])
    with pytest.raises(QueryError, match="quantK"):
        make_query(two_doc_index, {}, [1.0, 0.0], options=QueryOptions(True, quant_k=0))


def test_merge_messengers_order():
    out = merge_messengers([[1, 2, 5], [3, 5, 9]])
    assert list(zip(out["rowId"].tolist(), out["batchId"].tolist())) == [(1, 0), (2, 0), (3, 1), (5, 0), (5, 1), (9, 1)]


def test_matches_brute_force(small_index, rng):
    for _ in range(25):
        named = random_clauses(small_index, rng, SPEC)
        q = query_embedding_near(small_index, rng)
        res = execute(small_index, make_query(small_index, named, q, k=20))
        expect = brute_force(small_index, slot_clauses(small_index, named), q, 20)
        assert res.row_ids.tolist() == [r for _, r in expect]
        np.testing.assert_allclose(res.scores, [s for s, _ in expect], rtol=0, atol=1e-12)


def test_quant_k_covering_candidates_is_identity(small_index, rng):
    for _ in range(10):
        named = random_clauses(small_index, rng, SPEC)
        q = query_embedding_near(small_index, rng)
        plain = execute(small_index, make_query(small_index, named, q, k=10))
        quant = execute(small_index, make_query(small_index, named, q, k=10, options=QueryOptions(True, quant_k=small_index.num_docs)))
        assert plain == quant


@pytest.mark.parametrize("max_batch", [1, 2, 3, 8, 9, 16])
def test_batch_equals_single(small_index, max_batch):
    rng = np.random.default_rng(max_batch)
    queries = random_queries(small_index, 24, 15, rng, SPEC)
    queries += [make_query(small_index, random_clauses(small_index, rng, SPEC), query_embedding_near(small_index, rng), 12,
                           QueryOptions(True, quant_k=int(rng.integers(1, 400)))) for _ in range(8)]
    queries += [make_query(small_index, random_clauses(small_index, rng, SPEC), None, 5) for _ in range(3)]
    order = rng.permutation(len(queries))
    queries = [queries[i] for i in order]
    ex = Executor(small_index, max_batch)
    for start in range(0, len(queries), max_batch):
        chunk = queries[start:start + max_batch]
        for q, got in zip(chunk, ex.execute_batch(chunk)):
            assert got == execute(small_index, q)


def test_batch_stream_is_merged(two_doc_index):
    ex = Executor(two_doc_index, 4)
    a = make_query(two_doc_index, {"geo": [129]}, [1.0, 0.0])
    b = make_query(two_doc_index, {}, [1.0, 0.0])
    ex.execute_batch([a, b])
    pairs = list(zip(ex.last_stream["rowId"].tolist(), ex.last_stream["batchId"].tolist()))
    assert pairs == [(0, 1), (1, 0), (1, 1)]


def test_batch_item_errors_are_positional(two_doc_index):
    good = make_query(two_doc_index, {}, [1.0, 0.0], k=1)
    bad = HybridQuery(CNFQuery(((5, (1,)),)), None, 1)
    out = execute_batch(two_doc_index, [good, bad, good])
    assert isinstance(out[1], BatchItemError) and out[1].position == 1
    assert out[0] == out[2] == execute(two_doc_index, good)


def test_executor_limits(two_doc_index):
    ex = Executor(two_doc_index, 2)
    q = make_query(two_doc_index, {}, [1.0, 0.0])
    with pytest.raises(QueryError, match="maxBatch"):
        ex.execute_batch([q, q, q])
    with pytest.raises(QueryError):
        ex.execute_batch([])
    with pytest.raises(ValueError):
        Executor(two_doc_index, 0)


def test_timings_reported(small_index, rng):
    ex = Executor(small_index, 4)
    ex.execute_batch(random_queries(small_index, 4, 10, rng, SPEC))
    t = ex.last_timings.as_dict()
    assert set(t) == {"tbrMs", "quantMs", "ebrMs", "topkMs"}
    assert all(v >= 0 for v in t.values())
