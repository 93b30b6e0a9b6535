"""Exact embedding scoring of candidate rows and bucketized top-k selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SCORE_BOUNDS = (-1.0, 1.0)
BOUND_TOLERANCE = 1e-9
DEFAULT_GRANULARITY = 100


class ScoreBoundsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TopKResult:
    """Selected rows in descending score order, ties by ascending rowId."""

    row_ids: np.ndarray
    scores: np.ndarray
    doc_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.row_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TopKResult):
            return NotImplemented
        return (
            np.array_equal(self.row_ids, other.row_ids)
            and np.array_equal(self.scores, other.scores)
            and self.doc_ids == other.doc_ids
        )

    __hash__ = None

    def items(self) -> list[tuple[str, float]]:
        return list(zip(self.doc_ids, self.scores.tolist()))

    def with_doc_ids(self, index) -> "TopKResult":
        return TopKResult(self.row_ids, self.scores, tuple(index.doc_ids[r] for r in self.row_ids.tolist()))

    @classmethod
    def empty(cls) -> "TopKResult":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))


def normalize_query_embedding(embedding, dim: int) -> np.ndarray:
    q = np.asarray(embedding, dtype=np.float64)
    if q.shape != (dim,):
        raise ValueError(f"query embedding has shape {q.shape}, expected dim {dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query embedding has non-finite values")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        return q
    if abs(norm - 1.0) > 1e-6:
        log.debug("query embedding not unit length (norm %.6g), normalising", norm)
        q = q / norm
    return q


def score_block(rows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """(rows x queries) dot products.

    Every path scores through this kernel. einsum reduces each output
    element with the same loop whatever the number of query columns, so a
    row scored in a batch is bit-identical to the same row scored alone
    (BLAS gemm/gemv do not guarantee that).
    """
    return np.einsum("nd,bd->nb", rows, queries)


def exact_scores(index, query_embedding, candidates: np.ndarray) -> np.ndarray:
    """Copy of ``candidates`` with ``score`` set to the cosine similarity."""
    q = normalize_query_embedding(query_embedding, index.dim)
    out = candidates.copy()
    rows = out["rowId"]
    out["score"] = score_block(index.embeddings[rows], q[None, :])[:, 0]
    return out


def bucketize(scores: np.ndarray, granularity: int) -> np.ndarray:
    """Bucket ids ``floor(score * G) + G`` clamped to ``[0, 2G]``."""
    lo, hi = SCORE_BOUNDS
    if len(scores) and (scores.min() < lo - BOUND_TOLERANCE or scores.max() > hi + BOUND_TOLERANCE):
        raise ScoreBoundsError(
            f"scores must lie in [{lo}, {hi}], got range [{scores.min()}, {scores.max()}]"
        )
    buckets = np.floor(scores * granularity).astype(np.int64) + granularity
    return np.clip(buckets, 0, 2 * granularity)


def select_top_k(scores: np.ndarray, row_ids: np.ndarray, k: int, granularity: int = DEFAULT_GRANULARITY):
    """Positions of the top ``k`` items, found by sorting only the top buckets.

    Items are bucketized, bucket counts are accumulated from the highest
    bucket down until at least ``k`` items are gathered, and only the items
    in that suffix of buckets are sorted.
    """
    if granularity < 1:
        raise ValueError(f"granularity must be >= 1, got {granularity}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    buckets = bucketize(scores, granularity)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    counts = np.bincount(buckets, minlength=2 * granularity + 1)
    from_top = np.cumsum(counts[::-1])
    boundary = 2 * granularity - int(np.searchsorted(from_top, min(k, n)))
    pool = np.flatnonzero(buckets >= boundary)
    order = np.lexsort((row_ids[pool], -scores[pool]))[:k]
    return pool[order]


def full_sort_top_k(scores: np.ndarray, row_ids: np.ndarray, k: int) -> np.ndarray:
    """Reference selection: sort everything by (score desc, rowId asc)."""
    return np.lexsort((row_ids, -scores))[:k]


def bucket_top_k(scored: np.ndarray, k: int, granularity: int = DEFAULT_GRANULARITY) -> TopKResult:
    pos = select_top_k(scored["score"], scored["rowId"], k, granularity)
    return TopKResult(scored["rowId"][pos].copy(), scored["score"][pos].copy())
