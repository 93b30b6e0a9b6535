"""Full-scan term matching of CNF queries against every index row.

A query is a conjunction of clauses; a clause is satisfied when the
document's attribute run for that slot shares at least one id with the
query's id list. Slots the query does not mention are unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

MESSENGER_DTYPE = np.dtype([("rowId", "<i8"), ("batchId", "<i4"), ("score", "<f8")])


class Messenger(NamedTuple):
    row_id: int
    batch_id: int
    score: float = 0.0


class QueryError(ValueError):
    pass


def make_messengers(rows, batch_id: int = 0) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros(len(rows), dtype=MESSENGER_DTYPE)
    out["rowId"] = rows
    out["batchId"] = batch_id
    return out


def as_tuples(messengers: np.ndarray) -> list[Messenger]:
    return [Messenger(int(r), int(b), float(s)) for r, b, s in messengers.tolist()]


@dataclass(frozen=True)
class CNFQuery:
    clauses: tuple[tuple[int, tuple[int, ...]], ...] = ()

    @property
    def match_all(self) -> bool:
        return not self.clauses

    def to_raw(self) -> dict[int, list[int]]:
        return {slot: list(ids) for slot, ids in self.clauses}


def normalize_query(raw: Mapping, index) -> CNFQuery:
    """Sort and de-duplicate each clause, resolving clause names to slots."""
    clauses: dict[int, tuple[int, ...]] = {}
    for key, ids in raw.items():
        try:
            slot = index.clause_slot(key)
        except KeyError as exc:
            raise QueryError(f"unknown clause slot {key!r}") from exc
        if slot in clauses:
            raise QueryError(f"clause slot {key!r} given twice")
        if isinstance(ids, (str, bytes)) or not isinstance(ids, Sequence):
            raise QueryError(f"clause {key!r} must be a list of attribute ids")
        clean = set()
        for a in ids:
            if isinstance(a, bool) or not isinstance(a, (int, np.integer)):
                raise QueryError(f"attribute id {a!r} in clause {key!r} is not an integer")
            if a <= 0:
                raise QueryError(f"attribute id {a} in clause {key!r} must be positive (0 is padding)")
            clean.add(int(a))
        if not clean:
            raise QueryError(f"clause {key!r} is empty")
        clauses[slot] = tuple(sorted(clean))
    return CNFQuery(tuple(sorted(clauses.items())))


def sorted_intersects(a: Sequence[int], b: Sequence[int]) -> bool:
    """Two-pointer intersection test over two ascending sequences."""
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j]:
            return True
        if a[i] < b[j]:
            i += 1
        else:
            j += 1
    return False


def clause_matches(index, row_id: int, clause: tuple[int, Sequence[int]]) -> bool:
    slot, ids = clause
    return sorted_intersects(index.clause_slice(row_id, slot).tolist(), ids)


def match_mask(index, query: CNFQuery, out: np.ndarray | None = None) -> np.ndarray:
    """Boolean row mask of documents satisfying every clause."""
    if out is None:
        out = np.ones(index.num_docs, dtype=bool)
    else:
        out[:] = True
    for slot, ids in query.clauses:
        hit = np.isin(index.attributes, ids) & (index.position_slots == slot)
        out &= hit.any(axis=1)
    return out


def full_scan_tbr(index, query: CNFQuery, batch_id: int = 0) -> np.ndarray:
    """Messengers (ascending rowId) for every row matching ``query``."""
    return make_messengers(np.flatnonzero(match_mask(index, query)), batch_id)


class BatchMatcher:
    """Term matching for several queries in one pass over the attribute matrix.

    Every stored position is mapped once to a code in a per-slot vocabulary.
    For a batch, a (codes, batch) table holds bit ``s`` when that attribute
    satisfies the query's clause on slot ``s``; OR-ing the table rows of a
    document's positions gives each query's satisfied clauses, which are
    compared with the clauses it requires. A table row is packed into whole
    uint64 words so one gather serves up to 8 queries (8 with <= 8 clauses).
    """

    MAX_SLOTS = 64

    def __init__(self, index, max_batch: int):
        if index.num_clauses > self.MAX_SLOTS:
            raise ValueError(f"shared scan supports at most {self.MAX_SLOTS} clauses")
        self._dtype = next(np.dtype(t) for t in (np.uint8, np.uint16, np.uint32, np.uint64) if np.iinfo(t).bits >= index.num_clauses)
        self._per_word = 8 // self._dtype.itemsize
        slots = index.position_slots
        codes = np.zeros(slots.shape, dtype=np.int64)
        self._vocab: list[np.ndarray] = []
        self._base = np.zeros(index.num_clauses, dtype=np.int64)
        total = 0
        for s in range(index.num_clauses):
            where = slots == s
            vocab = np.unique(index.attributes[where])
            self._vocab.append(vocab)
            self._base[s] = total
            codes[where] = total + np.searchsorted(vocab, index.attributes[where])
            total += len(vocab)
        codes[slots < 0] = total  # padding points at an always-empty entry
        self._codes = np.asfortranarray(codes)  # read one position column at a time
        self._width = -(-max_batch // self._per_word) * self._per_word
        self._table = np.zeros((total + 1, self._width), dtype=self._dtype)
        self._touched: list[np.ndarray] = []

    def _mark(self, column: int, query: CNFQuery) -> int:
        required = 0
        for slot, ids in query.clauses:
            required |= 1 << slot
            vocab = self._vocab[slot]
            ids = np.asarray(ids, dtype=np.int64)
            pos = np.searchsorted(vocab, ids)
            found = pos[(pos < len(vocab)) & (vocab[np.minimum(pos, len(vocab) - 1)] == ids)] if len(vocab) else pos[:0]
            entries = self._base[slot] + found
            self._table[entries, column] |= self._dtype.type(1 << slot)
            self._touched.append(entries)
        return required

    def match(self, queries: Sequence[CNFQuery | None], out: np.ndarray) -> np.ndarray:
        """Fill ``out[:, j]`` (rows x batch) with query ``j``'s row mask.

        A ``None`` entry matches nothing.
        """
        b = len(queries)
        required = np.zeros(b, dtype=self._dtype)
        for j, query in enumerate(queries):
            if query is not None:
                required[j] = self._mark(j, query)
        padded = -(-b // self._per_word) * self._per_word
        n, positions = self._codes.shape
        try:
            packed = np.ascontiguousarray(self._table[:, :padded]).view(np.uint64)
            hits = np.zeros((n, packed.shape[1]), dtype=np.uint64)
            for w in range(positions):
                hits |= packed[self._codes[:, w]]
        finally:
            # packed may be a view of the table, so clear only after the scan
            for entries in self._touched:
                self._table[entries, :b] = 0
            self._touched.clear()
        hits = hits.view(self._dtype)[:, :b]
        np.equal(hits & required, required, out=out[:, :b])
        for j, query in enumerate(queries):
            if query is None:
                out[:, j] = False
        return out[:, :b]
