import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_retrieval import knn
from hybrid_retrieval.knn import ScoreBoundsError, TopKResult, bucket_top_k, exact_scores, select_top_k
from hybrid_retrieval.term_match import make_messengers


def sort_oracle(scores, rows, k):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], rows[i]))[:k]


def test_exact_scores_cosine(two_doc_index):
    out = exact_scores(two_doc_index, [1.0, 0.0], make_messengers([0, 1]))
    np.testing.assert_allclose(out["score"], [1.0, 0.6])
    assert out["rowId"].tolist() == [0, 1]


def test_query_normalized(two_doc_index):
    a = exact_scores(two_doc_index, [2.0, 0.0], make_messengers([0, 1]))["score"]
    b = exact_scores(two_doc_index, [1.0, 0.0], make_messengers([0, 1]))["score"]
    np.testing.assert_allclose(a, b)


def test_bad_query_dim(two_doc_index):
    with pytest.raises(ValueError, match="dim 2"):
        exact_scores(two_doc_index, [1.0, 0.0, 0.0], make_messengers([0]))


def test_score_block_column_independent(rng):
    E = rng.normal(size=(500, 24))
    Q = rng.normal(size=(9, 24))
    full = knn.score_block(E, Q)
    for j in range(9):
        assert np.array_equal(full[:, j], knn.score_block(E, Q[j:j + 1])[:, 0])


def test_bucketize_bounds():
    assert knn.bucketize(np.array([-1.0, 0.0, 0.999, 1.0]), 10).tolist() == [0, 10, 19, 20]
    knn.bucketize(np.array([1.0 + 1e-12]), 10)
    with pytest.raises(ScoreBoundsError):
        knn.bucketize(np.array([1.5]), 10)


def test_ties_broken_by_row():
    scores = np.array([0.5, 0.9, 0.5, 0.9, 0.1])
    rows = np.array([7, 3, 2, 1, 0])
    pos = select_top_k(scores, rows, 3, 2)
    assert rows[pos].tolist() == [1, 3, 2]


def test_k_larger_than_n():
    pos = select_top_k(np.array([0.2, -0.3]), np.array([0, 1]), 10)
    assert pos.tolist() == [0, 1]
    assert select_top_k(np.zeros(0), np.zeros(0, np.int64), 3).tolist() == []


def test_select_rejects_bad_args():
    with pytest.raises(ValueError):
        select_top_k(np.zeros(3), np.arange(3), 0)
    with pytest.raises(ValueError):
        select_top_k(np.zeros(3), np.arange(3), 1, granularity=0)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=300),
    st.integers(1, 50),
    st.sampled_from([1, 2, 7, 100]),
)
def test_bucket_selection_equals_sort(scores, k, g):
    scores = np.round(np.array(scores), 2)  # force ties
    rows = np.random.default_rng(len(scores)).permutation(len(scores))
    assert select_top_k(scores, rows, k, g).tolist() == sort_oracle(scores.tolist(), rows.tolist(), k)


def test_bucket_top_k_result(two_doc_index):
    scored = exact_scores(two_doc_index, [0.0, 1.0], make_messengers([0, 1]))
    res = bucket_top_k(scored, 1).with_doc_ids(two_doc_index)
    assert res.doc_ids == ("doc2",)
    assert res == TopKResult(np.array([1]), np.array([0.8]), ("doc2",))
