"""Sign quantization of embeddings and quantized candidate pre-selection.

Each codec round permutes the embedding coordinates, flips them with a random
sign, splits the permuted vector into equal-sized bins and keeps the sign of
every bin sum as one bit. Rounds are repeated with fresh randomness until
``num_bits`` bits have been produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_NUM_BITS = 512
DEFAULT_QUANT_K_MULTIPLIER = 200
WORD_BITS = 64


@dataclass(frozen=True)
class QuantRound:
    permutation: np.ndarray  # int64, a bijection on [0, dim)
    signs: np.ndarray  # float64, +1/-1 per permuted coordinate
    bin_starts: np.ndarray  # int64, start offset of each bin


@dataclass(frozen=True)
class QuantCodec:
    dim: int
    num_bits: int
    seed: int
    rounds: tuple[QuantRound, ...] = field(repr=False)

    @property
    def num_words(self) -> int:
        return num_words(self.num_bits)


@dataclass(frozen=True)
class Signature:
    """``num_bits`` sign bits packed little-endian into 64-bit words."""

    words: np.ndarray
    num_bits: int

    def bit(self, b: int) -> int:
        return int((int(self.words[b // WORD_BITS]) >> (b % WORD_BITS)) & 1)

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words[None, :], self.num_bits)[0]

    def complement(self) -> "Signature":
        words = ~self.words & word_masks(self.num_bits)
        return Signature(words, self.num_bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Signature):
            return NotImplemented
        return self.num_bits == other.num_bits and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.num_bits, self.words.tobytes()))


def num_words(num_bits: int) -> int:
    return (num_bits + WORD_BITS - 1) // WORD_BITS


def word_masks(num_bits: int) -> np.ndarray:
    """Per-word masks with ones on the valid bit positions."""
    masks = np.full(num_words(num_bits), np.iinfo(np.uint64).max, dtype=np.uint64)
    tail = num_bits % WORD_BITS
    if tail:
        masks[-1] = np.uint64((1 << tail) - 1)
    return masks


def make_codec(dim: int, num_bits: int = DEFAULT_NUM_BITS, seed: int = 0) -> QuantCodec:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if num_bits < 1:
        raise ValueError(f"num_bits must be >= 1, got {num_bits}")
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    rng = np.random.default_rng(seed)
    rounds = []
    remaining = num_bits
    for _ in range(math.ceil(num_bits / dim)):
        n_bins = min(remaining, dim)
        perm = rng.permutation(dim).astype(np.int64)
        signs = rng.choice(np.array([-1.0, 1.0]), size=dim)
        # array_split sizing: bins differ in size by at most one
        base, extra = divmod(dim, n_bins)
        sizes = np.full(n_bins, base, dtype=np.int64)
        sizes[:extra] += 1
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
        rounds.append(QuantRound(perm, signs, starts))
        remaining -= n_bins
    return QuantCodec(dim=dim, num_bits=num_bits, seed=seed, rounds=tuple(rounds))


def bin_aggregates(codec: QuantCodec, embeddings: np.ndarray) -> np.ndarray:
    """Signed bin sums for a (n, dim) matrix, shape (n, num_bits)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codec.dim:
        raise ValueError(f"expected embeddings of length {codec.dim}, got shape {x.shape}")
    parts = []
    for rnd in codec.rounds:
        permuted = x[:, rnd.permutation] * rnd.signs
        parts.append(np.add.reduceat(permuted, rnd.bin_starts, axis=1))
    return np.concatenate(parts, axis=1)[:, : codec.num_bits]


def pack_bits(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    n, nbits = bits.shape
    padded = np.zeros((n, num_words(nbits) * WORD_BITS), dtype=bool)
    padded[:, :nbits] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, num_bits: int) -> np.ndarray:
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    as_bytes = words.view(np.uint8).reshape(words.shape[0], -1)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :num_bits].astype(bool)


def encode_matrix(codec: QuantCodec, embeddings: np.ndarray) -> np.ndarray:
    """Encode every row; returns a (n, num_words) uint64 matrix."""
    return pack_bits(bin_aggregates(codec, embeddings) >= 0.0)


def encode(codec: QuantCodec, embedding) -> Signature:
    x = np.asarray(embedding, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != codec.dim:
        raise ValueError(f"embedding length {x.shape} does not match codec dim {codec.dim}")
    return Signature(encode_matrix(codec, x[None, :])[0], codec.num_bits)


def quant_score(a: Signature, b: Signature) -> int:
    """Number of bit positions where the two signatures agree."""
    if a.num_bits != b.num_bits:
        raise ValueError(f"bit width mismatch: {a.num_bits} vs {b.num_bits}")
    z = ~(a.words ^ b.words) & word_masks(a.num_bits)
    return int(np.bitwise_count(z).sum())


def quant_scores(signatures: np.ndarray, query_words: np.ndarray, num_bits: int) -> np.ndarray:
    """Vectorised ``quant_score`` of each signature row against one query."""
    z = ~(signatures ^ query_words[None, :]) & word_masks(num_bits)[None, :]
    return np.bitwise_count(z).sum(axis=1, dtype=np.int64)


def default_quant_k(k: int, multiplier: int = DEFAULT_QUANT_K_MULTIPLIER) -> int:
    return multiplier * k


def preselect(index, query_signature: Signature, candidates: np.ndarray, quant_k: int) -> np.ndarray:
    """Keep the ``quant_k`` candidates whose signatures best agree with the query.

    Ties go to the lower rowId. Output stays in ascending rowId order and
    candidate scores are left untouched.
    """
    if quant_k < 1:
        raise ValueError(f"quant_k must be >= 1, got {quant_k}")
    if len(candidates) <= quant_k:
        return candidates
    rows = candidates["rowId"]
    scores = quant_scores(index.signatures[rows], query_signature.words, query_signature.num_bits)
    keep = np.lexsort((rows, -scores))[:quant_k]
    survivors = candidates[keep]
    return survivors[np.argsort(survivors["rowId"], kind="stable")]
