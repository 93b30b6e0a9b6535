import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_retrieval.corpus import DocumentInput, IndexBuilder
from hybrid_retrieval.quantizer import make_codec
from hybrid_retrieval.term_match import (
    BatchMatcher,
    CNFQuery,
    QueryError,
    as_tuples,
    clause_matches,
    full_scan_tbr,
    match_mask,
    normalize_query,
    sorted_intersects,
)

from oracles import matches


def rows(index, raw):
    return full_scan_tbr(index, normalize_query(raw, index))["rowId"].tolist()


def test_worked_example(two_doc_index):
    assert rows(two_doc_index, {"geo": [129], "skill": [234]}) == [1]
    assert rows(two_doc_index, {"geo": [934, 129]}) == [0, 1]
    assert rows(two_doc_index, {"geo": [934], "skill": [234]}) == []
    assert rows(two_doc_index, {}) == [0, 1]


def test_messengers_ascending_with_batch_id(two_doc_index):
    out = full_scan_tbr(two_doc_index, CNFQuery(), batch_id=3)
    assert [tuple(m)[:2] for m in as_tuples(out)] == [(0, 3), (1, 3)]


def test_empty_document_clause_never_matches():
    b = IndexBuilder(2, 3, 2)
    b.add_document(DocumentInput("a", [[1], []], [1.0, 0.0]))
    b.add_document(DocumentInput("b", [[1], [7]], [1.0, 0.0]))
    idx = b.freeze(make_codec(2, 64))
    assert rows(idx, {0: [1], 1: [7, 8]}) == [1]
    assert rows(idx, {0: [1]}) == [0, 1]


def test_normalize_sorts_and_dedups(two_doc_index):
    q = normalize_query({"skill": [9, 3, 9], "geo": [5]}, two_doc_index)
    assert q.clauses == ((0, (5,)), (1, (3, 9)))


@pytest.mark.parametrize(
    "raw, msg",
    [
        ({"title": [1]}, "unknown clause"),
        ({"geo": [0]}, "positive"),
        ({"geo": [-3]}, "positive"),
        ({"geo": ["a"]}, "integer"),
        ({"geo": []}, "empty"),
        ({"geo": 5}, "list"),
        ({"geo": [1], "0": [2]}, "twice"),
    ],
)
def test_normalize_rejects(two_doc_index, raw, msg):
    with pytest.raises(QueryError, match=msg):
        normalize_query(raw, two_doc_index)


def test_sorted_intersects():
    assert sorted_intersects([1, 4, 9], [2, 9])
    assert not sorted_intersects([1, 4, 9], [2, 3, 10])
    assert not sorted_intersects([], [1])


def test_clause_matches(two_doc_index):
    assert clause_matches(two_doc_index, 0, (1, (342,)))
    assert not clause_matches(two_doc_index, 1, (1, (342,)))


def random_raw(rng, index, vocab):
    raw = {}
    for slot in range(index.num_clauses):
        if rng.random() < 0.6:
            raw[slot] = rng.choice(np.arange(1, vocab + 1), size=int(rng.integers(1, 5)), replace=False).tolist()
    return raw


def random_index(seed, n=60, vocab=8, max_attr=6):
    rng = np.random.default_rng(seed)
    b = IndexBuilder(3, max_attr, 2)
    for i in range(n):
        sizes = rng.multinomial(int(rng.integers(0, max_attr + 1)), [1 / 3] * 3)
        clauses = [rng.choice(np.arange(1, vocab + 1), size=s, replace=False).tolist() for s in sizes]
        b.add_document(DocumentInput(f"d{i}", clauses, [1.0, 0.0]))
    return b.freeze(make_codec(2, 64))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_full_scan_matches_set_oracle(seed):
    idx = random_index(seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(5):
        raw = random_raw(rng, idx, 8)
        expect = [r for r in range(idx.num_docs) if matches(idx, r, raw)]
        assert rows(idx, raw) == expect
        two_pointer = [r for r in range(idx.num_docs) if all(clause_matches(idx, r, c) for c in normalize_query(raw, idx).clauses)]
        assert two_pointer == expect


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 17))
def test_batch_matcher_agrees_with_match_mask(seed, max_batch):
    idx = random_index(seed)
    rng = np.random.default_rng(seed)
    matcher = BatchMatcher(idx, max_batch)
    out = np.zeros((idx.num_docs, max_batch), dtype=bool)
    for _ in range(3):
        b = int(rng.integers(1, max_batch + 1))
        queries = [normalize_query(random_raw(rng, idx, 10), idx) for _ in range(b)]
        got = matcher.match(queries, out)
        for j, q in enumerate(queries):
            assert np.array_equal(got[:, j], match_mask(idx, q))


def test_batch_matcher_none_matches_nothing(two_doc_index):
    matcher = BatchMatcher(two_doc_index, 2)
    out = matcher.match([None, CNFQuery()], np.zeros((2, 2), dtype=bool))
    assert out[:, 0].tolist() == [False, False]
    assert out[:, 1].tolist() == [True, True]
