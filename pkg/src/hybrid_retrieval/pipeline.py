"""Term matching -> optional quantized pre-selection -> exact scoring -> top-k.

``Executor`` owns scratch buffers sized once from the index and ``max_batch``;
requests larger than that are rejected instead of growing memory. A batch is
evaluated as one merged messenger stream ordered by (rowId, batchId): the
attribute matrix is scanned once for the whole batch, and the signature and
embedding rows wanted by any query are each gathered once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import knn, quantizer
from .knn import TopKResult
from .term_match import MESSENGER_DTYPE, BatchMatcher, CNFQuery, QueryError, full_scan_tbr, normalize_query


@dataclass(frozen=True)
class QueryOptions:
    quant_enabled: bool = False
    quant_k: int | None = None  # None -> 200 * k
    granularity: int = knn.DEFAULT_GRANULARITY


@dataclass(frozen=True)
class HybridQuery:
    terms: CNFQuery = CNFQuery()
    embedding: np.ndarray | None = None
    k: int = 10
    options: QueryOptions = QueryOptions()

    def quant_k(self) -> int:
        if self.options.quant_k is not None:
            return self.options.quant_k
        return quantizer.default_quant_k(self.k)


@dataclass(frozen=True)
class BatchItemError:
    position: int
    message: str


def make_query(
    index,
    clauses: Mapping | None = None,
    embedding: Sequence[float] | None = None,
    k: int = 10,
    options: QueryOptions | None = None,
) -> HybridQuery:
    """Build and validate a query against ``index``; raises QueryError."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise QueryError(f"k must be a positive integer, got {k!r}")
    options = options or QueryOptions()
    if options.quant_k is not None and options.quant_k < 1:
        raise QueryError(f"quantK must be >= 1, got {options.quant_k}")
    if options.granularity < 1:
        raise QueryError(f"granularity must be >= 1, got {options.granularity}")
    emb = None
    if embedding is not None:
        try:
            emb = knn.normalize_query_embedding(embedding, index.dim)
        except (ValueError, TypeError) as exc:
            raise QueryError(str(exc)) from exc
    return HybridQuery(normalize_query(clauses or {}, index), emb, int(k), options)


def validate_query(index, query: HybridQuery) -> None:
    for slot, _ in query.terms.clauses:
        if not 0 <= slot < index.num_clauses:
            raise QueryError(f"unknown clause slot {slot}")
    if query.k < 1:
        raise QueryError(f"k must be >= 1, got {query.k}")
    if query.embedding is not None and np.shape(query.embedding) != (index.dim,):
        raise QueryError(f"embedding has shape {np.shape(query.embedding)}, expected dim {index.dim}")


def _term_only(index, rows: np.ndarray, k: int) -> TopKResult:
    rows = rows[:k].astype(np.int64)
    return TopKResult(rows, np.zeros(len(rows)), tuple(index.doc_ids[r] for r in rows.tolist()))


def execute(index, query: HybridQuery) -> TopKResult:
    """Single-query reference path built directly from the stage functions."""
    validate_query(index, query)
    candidates = full_scan_tbr(index, query.terms)
    if query.embedding is None:
        return _term_only(index, candidates["rowId"], query.k)
    q = knn.normalize_query_embedding(query.embedding, index.dim)
    if query.options.quant_enabled:
        signature = quantizer.encode(index.codec, q)
        candidates = quantizer.preselect(index, signature, candidates, query.quant_k())
    scored = knn.exact_scores(index, q, candidates)
    return knn.bucket_top_k(scored, query.k, query.options.granularity).with_doc_ids(index)


def merge_messengers(row_sets: Sequence[Sequence[int]]) -> np.ndarray:
    """Merge per-query eligible rows into one stream ordered by (rowId, batchId)."""
    rows = np.concatenate([np.asarray(r, dtype=np.int64) for r in row_sets]) if row_sets else np.zeros(0, np.int64)
    bids = np.concatenate([np.full(len(r), b, dtype=np.int32) for b, r in enumerate(row_sets)]) if row_sets else np.zeros(0, np.int32)
    order = np.lexsort((bids, rows))
    out = np.zeros(len(rows), dtype=MESSENGER_DTYPE)
    out["rowId"] = rows[order]
    out["batchId"] = bids[order]
    return out


@dataclass
class StageTimings:
    tbr: float = 0.0
    quant: float = 0.0
    ebr: float = 0.0
    topk: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"tbrMs": self.tbr * 1e3, "quantMs": self.quant * 1e3, "ebrMs": self.ebr * 1e3, "topkMs": self.topk * 1e3}


class Executor:
    """Batch executor over one FrozenIndex. Not thread-safe; use one per worker."""

    def __init__(self, index, max_batch: int = 16):
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self.index = index
        self.max_batch = max_batch
        self._matcher = BatchMatcher(index, max_batch)
        self._hits = np.zeros((index.num_docs, max_batch), dtype=bool)
        self._queries = np.zeros((max_batch, index.dim), dtype=np.float64)
        self._qsigs = np.zeros((max_batch, index.signatures.shape[1]), dtype=np.uint64)
        self._word_masks = quantizer.word_masks(index.num_bits)
        self.last_timings = StageTimings()
        self.last_stream: np.ndarray = np.zeros(0, dtype=MESSENGER_DTYPE)

    def execute(self, query: HybridQuery) -> TopKResult:
        result = self.execute_batch([query])[0]
        if isinstance(result, BatchItemError):
            raise QueryError(result.message)
        return result

    def execute_batch(self, batch: Sequence[HybridQuery]) -> list[TopKResult | BatchItemError]:
        b = len(batch)
        if b < 1:
            raise QueryError("empty batch")
        if b > self.max_batch:
            raise QueryError(f"batch of {b} exceeds maxBatch {self.max_batch}")
        index = self.index
        timings = StageTimings()
        results: list[TopKResult | BatchItemError | None] = [None] * b

        t0 = time.perf_counter()
        terms: list[CNFQuery | None] = []
        for i, query in enumerate(batch):
            try:
                validate_query(index, query)
                terms.append(query.terms)
            except QueryError as exc:
                results[i] = BatchItemError(i, str(exc))
                terms.append(None)
        hits = self._matcher.match(terms, self._hits)
        # row-major nonzero over (rows x batch) is already (rowId, batchId) order
        row_ids, batch_ids = np.nonzero(hits)
        stream = np.zeros(len(row_ids), dtype=MESSENGER_DTYPE)
        stream["rowId"] = row_ids
        stream["batchId"] = batch_ids
        self.last_stream = stream
        timings.tbr = time.perf_counter() - t0

        embedded = np.array([results[i] is None and q.embedding is not None for i, q in enumerate(batch)], dtype=bool)
        cols = np.flatnonzero(embedded)
        for i in cols:
            self._queries[i] = knn.normalize_query_embedding(batch[i].embedding, index.dim)
        # rows wanted by any embedded query, each gathered once for the batch
        union = np.flatnonzero(hits[:, cols].any(axis=1)) if len(cols) else np.zeros(0, np.int64)
        keep = hits[union][:, cols]

        t0 = time.perf_counter()
        quant = [j for j, i in enumerate(cols) if batch[i].options.quant_enabled]
        if quant:
            qcols = cols[quant]
            self._qsigs[qcols] = quantizer.encode_matrix(index.codec, self._queries[qcols])
            same = ~(index.signatures[union][:, None, :] ^ self._qsigs[qcols][None, :, :]) & self._word_masks
            qscores = np.bitwise_count(same).sum(axis=2, dtype=np.int64)
            for c, j in enumerate(quant):
                members = np.flatnonzero(keep[:, j])
                limit = batch[cols[j]].quant_k()
                if len(members) > limit:
                    ranked = members[np.lexsort((union[members], -qscores[members, c]))]
                    keep[ranked[limit:], j] = False
        timings.quant = time.perf_counter() - t0

        t0 = time.perf_counter()
        rows = index.embeddings if len(union) == index.num_docs else index.embeddings[union]
        scores = knn.score_block(rows, self._queries[cols])
        timings.ebr = time.perf_counter() - t0

        t0 = time.perf_counter()
        for j, i in enumerate(cols):
            members = np.flatnonzero(keep[:, j])
            pos = members[knn.select_top_k(scores[members, j], union[members], batch[i].k, batch[i].options.granularity)]
            results[i] = TopKResult(union[pos], scores[pos, j]).with_doc_ids(index)
        for i, query in enumerate(batch):
            if results[i] is None:
                results[i] = _term_only(index, np.flatnonzero(hits[:, i]), query.k)
        timings.topk = time.perf_counter() - t0
        self.last_timings = timings
        return results  # type: ignore[return-value]


def execute_batch(index, batch: Sequence[HybridQuery], max_batch: int | None = None):
    return Executor(index, max_batch or max(1, len(batch))).execute_batch(batch)
