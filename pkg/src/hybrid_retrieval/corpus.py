"""Immutable document index: clause attributes, embeddings and signatures.

Attributes are stored flattened per document, one contiguous sorted run per
clause, padded with zeros up to ``max_num_attr``. ``offsets[i]`` holds the
begin/end positions of each clause run, so the run for clause ``c`` of row
``i`` is ``attributes[i, offsets[i, c]:offsets[i, c + 1]]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .quantizer import QuantCodec, encode_matrix, make_codec, num_words

MAGIC = b"HYBRIDX1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQIIIIQ")
_U32 = struct.Struct("<I")
_CHECKSUM = struct.Struct("<Q")
PADDING = 0


class IndexValidationError(ValueError):
    """A document or builder argument violates the index contract."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class DuplicateDocumentError(IndexValidationError):
    pass


class IndexFormatError(Exception):
    """The index file cannot be decoded."""


class TruncatedIndexError(IndexFormatError):
    pass


class VersionMismatchError(IndexFormatError):
    pass


class ChecksumError(IndexFormatError):
    pass


class IngestError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class DocumentInput:
    doc_id: str
    clauses: Sequence[Sequence[int]]
    embedding: Sequence[float]


@dataclass(frozen=True)
class IndexSchema:
    clause_names: tuple[str, ...]
    dim: int
    max_num_attr: int

    @property
    def num_clauses(self) -> int:
        return len(self.clause_names)

    @classmethod
    def from_dict(cls, data: dict) -> "IndexSchema":
        try:
            names = tuple(str(n) for n in data["clauses"])
            return cls(names, int(data["dim"]), int(data["maxNumAttr"]))
        except (KeyError, TypeError) as exc:
            raise IndexValidationError("schema", f"missing or malformed key {exc}") from exc

    @classmethod
    def load(cls, path) -> "IndexSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"clauses": list(self.clause_names), "dim": self.dim, "maxNumAttr": self.max_num_attr}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FrozenIndex:
    num_docs: int
    num_clauses: int
    max_num_attr: int
    dim: int
    attributes: np.ndarray  # (num_docs, max_num_attr) int64
    offsets: np.ndarray  # (num_docs, num_clauses + 1) int64
    embeddings: np.ndarray  # (num_docs, dim) float64, unit rows or all-zero
    signatures: np.ndarray  # (num_docs, num_words) uint64
    codec: QuantCodec
    doc_ids: tuple[str, ...]
    zero_embedding: np.ndarray  # (num_docs,) bool
    clause_names: tuple[str, ...] = ()
    _row_of: dict = field(init=False, repr=False)
    # clause slot of every stored attribute position, -1 on padding
    position_slots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_row_of", {d: i for i, d in enumerate(self.doc_ids)})
        for name in ("attributes", "offsets", "embeddings", "signatures", "zero_embedding"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        positions = np.arange(self.max_num_attr)[None, :]
        slots = (positions[:, :, None] >= self.offsets[:, None, 1:]).sum(axis=2)
        slots[positions >= self.offsets[:, -1:]] = -1
        object.__setattr__(self, "position_slots", _readonly(slots.astype(np.int16)))

    @property
    def num_bits(self) -> int:
        return self.codec.num_bits

    def row_of(self, doc_id: str) -> int:
        return self._row_of[doc_id]

    def clause_slice(self, row: int, clause: int) -> np.ndarray:
        lo, hi = self.offsets[row, clause], self.offsets[row, clause + 1]
        return self.attributes[row, lo:hi]

    def clause_slot(self, key) -> int:
        """Resolve a clause name or integer slot to a slot index."""
        if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
            slot = int(key)
        elif isinstance(key, str) and key in self.clause_names:
            slot = self.clause_names.index(key)
        elif isinstance(key, str) and key.isdigit():
            slot = int(key)
        else:
            raise KeyError(f"unknown clause slot {key!r}")
        if not 0 <= slot < self.num_clauses:
            raise KeyError(f"unknown clause slot {key!r}")
        return slot

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrozenIndex):
            return NotImplemented
        scalars = ("num_docs", "num_clauses", "max_num_attr", "dim", "doc_ids", "clause_names")
        arrays = ("attributes", "offsets", "embeddings", "signatures", "zero_embedding")
        return (
            all(getattr(self, s) == getattr(other, s) for s in scalars)
            and (self.codec.num_bits, self.codec.seed) == (other.codec.num_bits, other.codec.seed)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )

    __hash__ = None

    def verify(self) -> None:
        """Check the structural invariants; raises AssertionError on violation."""
        off = self.offsets
        assert np.all(off[:, 0] == 0)
        assert np.all(np.diff(off, axis=1) >= 0)
        assert np.all(off[:, -1] <= self.max_num_attr)
        for i in range(self.num_docs):
            for c in range(self.num_clauses):
                assert np.all(np.diff(self.clause_slice(i, c)) > 0)
            assert np.all(self.attributes[i, off[i, -1]:] == PADDING)
        norms = np.linalg.norm(self.embeddings, axis=1)
        assert np.all(np.abs(norms[~self.zero_embedding] - 1.0) <= 1e-6)
        assert np.all(norms[self.zero_embedding] == 0.0)
        assert np.array_equal(self.signatures, encode_matrix(self.codec, self.embeddings))
        assert len(set(self.doc_ids)) == self.num_docs


class IndexBuilder:
    """Single-writer staging area for documents before freezing."""

    def __init__(self, num_clauses: int, max_num_attr: int, dim: int, clause_names: Sequence[str] = ()):
        if num_clauses < 1 or max_num_attr < 0 or dim < 1:
            raise IndexValidationError("builder", "num_clauses and dim must be >= 1, max_num_attr >= 0")
        if clause_names and len(clause_names) != num_clauses:
            raise IndexValidationError("clause_names", f"expected {num_clauses} names")
        self.num_clauses = num_clauses
        self.max_num_attr = max_num_attr
        self.dim = dim
        self.clause_names = tuple(clause_names)
        self._docs: list[tuple[str, list[list[int]], np.ndarray]] = []
        self._ids: set[str] = set()
        self.frozen = False

    @classmethod
    def from_schema(cls, schema: IndexSchema) -> "IndexBuilder":
        return cls(schema.num_clauses, schema.max_num_attr, schema.dim, schema.clause_names)

    def __len__(self) -> int:
        return len(self._docs)

    def add_document(self, doc: DocumentInput) -> int:
        if self.frozen:
            raise IndexValidationError("builder", "already frozen")
        if doc.doc_id in self._ids:
            raise DuplicateDocumentError("docId", f"duplicate docId {doc.doc_id!r}")
        if len(doc.clauses) != self.num_clauses:
            raise IndexValidationError(
                "clauses", f"expected {self.num_clauses} clauses, got {len(doc.clauses)}"
            )
        clauses = []
        for c, attrs in enumerate(doc.clauses):
            ids = []
            for a in attrs:
                if isinstance(a, bool) or not isinstance(a, (int, np.integer)):
                    raise IndexValidationError("clauses", f"attribute id {a!r} in clause {c} is not an integer")
                if a == PADDING:
                    raise IndexValidationError("clauses", "attribute id 0 reserved for padding")
                if a < 0 or a >= 2**63:
                    raise IndexValidationError("clauses", f"attribute id {a} out of range")
                ids.append(int(a))
            clauses.append(ids)
        emb = np.asarray(doc.embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            raise IndexValidationError("embedding", f"expected length {self.dim}, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise IndexValidationError("embedding", "non-finite value")
        self._docs.append((doc.doc_id, clauses, emb))
        self._ids.add(doc.doc_id)
        return len(self._docs) - 1

    def freeze(self, codec: QuantCodec) -> FrozenIndex:
        if not self._docs:
            raise IndexValidationError("builder", "no documents")
        if codec.dim != self.dim:
            raise IndexValidationError("codec", f"codec dim {codec.dim} != index dim {self.dim}")
        n = len(self._docs)
        runs = [[sorted(set(attrs)) for attrs in clauses] for _, clauses, _ in self._docs]
        widths = [sum(len(r) for r in doc_runs) for doc_runs in runs]
        offenders = [self._docs[i][0] for i, w in enumerate(widths) if w > self.max_num_attr]
        if offenders:
            raise IndexValidationError(
                "maxNumAttr", f"{len(offenders)} documents exceed {self.max_num_attr}: {offenders}"
            )
        attributes = np.zeros((n, self.max_num_attr), dtype=np.int64)
        offsets = np.zeros((n, self.num_clauses + 1), dtype=np.int64)
        for i, doc_runs in enumerate(runs):
            pos = 0
            for c, run in enumerate(doc_runs):
                attributes[i, pos:pos + len(run)] = run
                pos += len(run)
                offsets[i, c + 1] = pos
        raw = np.stack([emb for _, _, emb in self._docs])
        norms = np.linalg.norm(raw, axis=1)
        zero = norms == 0.0
        embeddings = np.divide(raw, norms[:, None], out=np.zeros_like(raw), where=~zero[:, None])
        self.frozen = True
        return FrozenIndex(
            num_docs=n,
            num_clauses=self.num_clauses,
            max_num_attr=self.max_num_attr,
            dim=self.dim,
            attributes=attributes,
            offsets=offsets,
            embeddings=embeddings,
            signatures=encode_matrix(codec, embeddings),
            codec=codec,
            doc_ids=tuple(d for d, _, _ in self._docs),
            zero_embedding=zero,
            clause_names=self.clause_names,
        )


def add_document(builder: IndexBuilder, doc: DocumentInput) -> int:
    return builder.add_document(doc)


def freeze(builder: IndexBuilder, codec: QuantCodec) -> FrozenIndex:
    return builder.freeze(codec)


def build_index(
    docs: Iterable[DocumentInput], schema: IndexSchema, num_bits: int = 512, seed: int = 0
) -> FrozenIndex:
    builder = IndexBuilder.from_schema(schema)
    for doc in docs:
        builder.add_document(doc)
    return builder.freeze(make_codec(schema.dim, num_bits, seed))


# -- binary file format -------------------------------------------------------


def _array_layout(num_docs: int, num_clauses: int, max_num_attr: int, dim: int, num_bits: int):
    return (
        ("attributes", "<i8", (num_docs, max_num_attr)),
        ("offsets", "<i8", (num_docs, num_clauses + 1)),
        ("embeddings", "<f8", (num_docs, dim)),
        ("signatures", "<u8", (num_docs, num_words(num_bits))),
        ("zero_embedding", "u1", (num_docs,)),
    )


def dumps(index: FrozenIndex) -> bytes:
    meta = json.dumps({"clauseNames": list(index.clause_names), "docIds": list(index.doc_ids)}).encode()
    parts = [
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, index.num_docs, index.num_clauses, index.max_num_attr,
            index.dim, index.num_bits, index.codec.seed,
        ),
        _U32.pack(len(meta)),
        meta,
    ]
    layout = _array_layout(index.num_docs, index.num_clauses, index.max_num_attr, index.dim, index.num_bits)
    for name, dtype, _ in layout:
        parts.append(np.ascontiguousarray(getattr(index, name), dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + _CHECKSUM.pack(_checksum(body))


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def loads(data: bytes) -> FrozenIndex:
    if len(data) < _HEADER.size + _U32.size:
        raise TruncatedIndexError(f"file holds {len(data)} bytes, header needs {_HEADER.size + _U32.size}")
    magic, version, n, n_clauses, max_attr, dim, num_bits, seed = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {FORMAT_VERSION}")
    pos = _HEADER.size
    (meta_len,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    layout = _array_layout(n, n_clauses, max_attr, dim, num_bits)
    sizes = [int(np.prod(shape)) * np.dtype(dt).itemsize for _, dt, shape in layout]
    expected = pos + meta_len + sum(sizes) + _CHECKSUM.size
    if len(data) < expected:
        raise TruncatedIndexError(f"file holds {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise IndexFormatError(f"{len(data) - expected} trailing bytes")
    body = data[:-_CHECKSUM.size]
    (stored,) = _CHECKSUM.unpack_from(data, len(body))
    if stored != _checksum(body):
        raise ChecksumError("checksum mismatch")
    meta = json.loads(data[pos:pos + meta_len])
    pos += meta_len
    arrays = {}
    for (name, dtype, shape), size in zip(layout, sizes):
        arrays[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += size
    return FrozenIndex(
        num_docs=n,
        num_clauses=n_clauses,
        max_num_attr=max_attr,
        dim=dim,
        attributes=arrays["attributes"].astype(np.int64),
        offsets=arrays["offsets"].astype(np.int64),
        embeddings=arrays["embeddings"].astype(np.float64),
        signatures=arrays["signatures"].astype(np.uint64),
        codec=make_codec(dim, num_bits, seed),
        doc_ids=tuple(meta["docIds"]),
        zero_embedding=arrays["zero_embedding"].astype(bool),
        clause_names=tuple(meta["clauseNames"]),
    )


def save(index: FrozenIndex, path) -> int:
    data = dumps(index)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> FrozenIndex:
    return loads(Path(path).read_bytes())


# -- line-delimited ingestion -------------------------------------------------


def document_to_record(doc: DocumentInput, schema: IndexSchema) -> dict:
    return {
        "docId": doc.doc_id,
        "clauses": {name: list(map(int, ids)) for name, ids in zip(schema.clause_names, doc.clauses)},
        "embedding": [float(v) for v in doc.embedding],
    }


def record_to_document(record: dict, schema: IndexSchema) -> DocumentInput:
    clauses = record.get("clauses", {})
    if not isinstance(clauses, dict):
        raise ValueError("clauses must be an object keyed by clause name")
    unknown = set(clauses) - set(schema.clause_names)
    if unknown:
        raise ValueError(f"unknown clause names {sorted(unknown)}")
    embedding = record.get("embedding")
    if embedding is None:
        embedding = [0.0] * schema.dim
    return DocumentInput(
        doc_id=str(record["docId"]),
        clauses=[list(clauses.get(name, [])) for name in schema.clause_names],
        embedding=embedding,
    )


def _numbered_documents(path, schema: IndexSchema) -> list[tuple[int, DocumentInput]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append((lineno, record_to_document(json.loads(line), schema)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestError(lineno, str(exc)) from exc
    return out


def read_documents(path, schema: IndexSchema) -> list[DocumentInput]:
    return [doc for _, doc in _numbered_documents(path, schema)]


def write_documents(path, docs: Iterable[DocumentInput], schema: IndexSchema) -> None:
    with open(path, "w") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_record(doc, schema)) + "\n")


def build_from_file(ingest_path, schema: IndexSchema, num_bits: int = 512, seed: int = 0) -> FrozenIndex:
    docs = _numbered_documents(ingest_path, schema)
    if not docs:
        raise IndexValidationError("ingest", "no documents")
    builder = IndexBuilder.from_schema(schema)
    for lineno, doc in docs:
        try:
            builder.add_document(doc)
        except IndexValidationError as exc:
            raise IngestError(lineno, str(exc)) from exc
    return builder.freeze(make_codec(schema.dim, num_bits, seed))
