"""Synthetic corpora and latency/throughput benchmarks for the retrieval engine."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import knn
from .corpus import DocumentInput, FrozenIndex, IndexBuilder, IndexSchema
from .pipeline import Executor, HybridQuery, QueryOptions, make_query
from .quantizer import make_codec

PASS_CLAUSE = "pass"
PASS_LEVELS = 100


@dataclass(frozen=True)
class SyntheticSpec:
    num_docs: int = 10_000
    dim: int = 64
    n_clusters: int = 32
    cluster_spread: float = 0.35
    skill_vocab: int = 40
    geo_vocab: int = 10
    num_bits: int = 512
    seed: int = 0


def synthetic_schema(spec: SyntheticSpec) -> IndexSchema:
    return IndexSchema((PASS_CLAUSE, "geo", "skill"), spec.dim, 1 + 2 + 4)


def clustered_embeddings(n: int, dim: int, n_clusters: int, spread: float, rng: np.random.Generator):
    centers = rng.normal(size=(n_clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(n_clusters, size=n)
    x = centers[labels] + rng.normal(scale=spread / np.sqrt(dim), size=(n, dim))
    return x, centers, labels


def synthetic_documents(spec: SyntheticSpec) -> list[DocumentInput]:
    """Clustered embeddings plus three clause slots.

    ``pass`` holds one id in 1..100 spread evenly over rows, so a query for
    ids 1..r passes r% of documents; ``geo`` and ``skill`` are random.
    """
    rng = np.random.default_rng(spec.seed)
    emb, _, _ = clustered_embeddings(spec.num_docs, spec.dim, spec.n_clusters, spec.cluster_spread, rng)
    level = rng.permutation(np.arange(spec.num_docs) % PASS_LEVELS) + 1
    docs = []
    for i in range(spec.num_docs):
        geo = rng.choice(np.arange(1, spec.geo_vocab + 1), size=rng.integers(0, 3), replace=False)
        skill = rng.choice(np.arange(1, spec.skill_vocab + 1), size=rng.integers(0, 5), replace=False)
        docs.append(DocumentInput(f"doc{i}", [[int(level[i])], geo.tolist(), skill.tolist()], emb[i]))
    return docs


def synthetic_index(spec: SyntheticSpec = SyntheticSpec()) -> FrozenIndex:
    schema = synthetic_schema(spec)
    builder = IndexBuilder.from_schema(schema)
    for doc in synthetic_documents(spec):
        builder.add_document(doc)
    return builder.freeze(make_codec(spec.dim, spec.num_bits, spec.seed))


def random_clauses(index: FrozenIndex, rng: np.random.Generator, spec: SyntheticSpec) -> dict:
    clauses = {}
    if rng.random() < 0.5:
        clauses["geo"] = rng.choice(np.arange(1, spec.geo_vocab + 1), size=rng.integers(1, 6), replace=False).tolist()
    if rng.random() < 0.5:
        clauses["skill"] = rng.choice(np.arange(1, spec.skill_vocab + 1), size=rng.integers(1, 15), replace=False).tolist()
    if rng.random() < 0.3:
        clauses[PASS_CLAUSE] = list(range(1, int(rng.integers(1, PASS_LEVELS)) + 1))
    return clauses


def query_embedding_near(index: FrozenIndex, rng: np.random.Generator, noise: float = 0.5) -> np.ndarray:
    """A query vector close to a random document's embedding."""
    row = int(rng.integers(index.num_docs))
    q = index.embeddings[row] + rng.normal(scale=noise / np.sqrt(index.dim), size=index.dim)
    return q / np.linalg.norm(q)


def pass_rate_clauses(rate: float) -> dict:
    return {PASS_CLAUSE: list(range(1, max(1, round(rate * PASS_LEVELS)) + 1))}


def _percentiles(samples_ms: list[float]) -> dict:
    a = np.asarray(samples_ms)
    return {"p50Ms": float(np.percentile(a, 50)), "p95Ms": float(np.percentile(a, 95)), "p99Ms": float(np.percentile(a, 99))}


def bench_batches(
    index: FrozenIndex,
    batch_sizes=(1, 2, 4, 8, 16),
    pass_rates=(1.0,),
    k: int = 100,
    n_queries: int = 64,
    quant_enabled: bool = False,
    repeats: int = 1,
    seed: int = 0,
    use_pass_clause: bool = True,
) -> list[dict]:
    """QPS and per-request latency for each (pass rate, batch size).

    A request's latency is the wall time of the batch that carried it.
    Without ``use_pass_clause`` only match-all (rate 1.0) workloads are run.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for rate in pass_rates:
        clauses = pass_rate_clauses(rate) if use_pass_clause else {}
        queries = [
            make_query(index, clauses, query_embedding_near(index, rng), k, QueryOptions(quant_enabled=quant_enabled))
            for _ in range(n_queries)
        ]
        for b in batch_sizes:
            executor = Executor(index, max_batch=b)
            executor.execute_batch(queries[:b])  # warm-up
            latencies = []
            total = 0.0
            for _ in range(repeats):
                for start in range(0, n_queries - b + 1, b):
                    t0 = time.perf_counter()
                    executor.execute_batch(queries[start:start + b])
                    dt = time.perf_counter() - t0
                    total += dt
                    latencies.extend([dt * 1e3] * b)
            served = len(latencies)
            rows.append(
                {
                    "passRate": rate,
                    "batchSize": b,
                    "quant": quant_enabled,
                    "queries": served,
                    "qps": served / total,
                    "meanLatencyMs": float(np.mean(latencies)),
                    **_percentiles(latencies),
                }
            )
    return rows


def bench_topk(n: int = 1_000_000, k: int = 2000, granularities=(2, 100), repeats: int = 5, seed: int = 0) -> list[dict]:
    """Full-sort selection vs bucketized selection on uniform scores in [-1, 1]."""
    rng = np.random.default_rng(seed)
    scores = rng.uniform(-1.0, 1.0, n)
    rows_ids = np.arange(n, dtype=np.int64)

    def best_of(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
        return min(times) * 1e3, out

    sort_ms, ref = best_of(lambda: knn.full_sort_top_k(scores, rows_ids, k))
    out = [{"method": "sort", "granularity": 0, "ms": sort_ms, "speedup": 1.0, "identical": True}]
    for g in granularities:
        ms, got = best_of(lambda: knn.select_top_k(scores, rows_ids, k, g))
        out.append(
            {"method": "bucket", "granularity": g, "ms": ms, "speedup": sort_ms / ms, "identical": bool(np.array_equal(got, ref))}
        )
    return out


def bench_layout(num_docs: int = 200_000, dim: int = 64, pass_rates=(1.0, 0.5, 0.2, 0.1, 0.05, 0.01), seed: int = 0) -> list[dict]:
    """Score a subset of rows from a row-major vs a column-major embedding matrix."""
    rng = np.random.default_rng(seed)
    row_major = rng.normal(size=(num_docs, dim))
    col_major = np.asfortranarray(row_major)
    q = rng.normal(size=dim)
    out = []
    for rate in pass_rates:
        rows = np.sort(rng.choice(num_docs, size=max(1, int(rate * num_docs)), replace=False))
        timings = {}
        for name, mat in (("rowMajorMs", row_major), ("colMajorMs", col_major)):
            t0 = time.perf_counter()
            for _ in range(3):
                mat[rows] @ q
            timings[name] = (time.perf_counter() - t0) / 3 * 1e3
        out.append({"passRate": rate, **timings})
    return out


def random_queries(index: FrozenIndex, n: int, k: int, rng: np.random.Generator, spec: SyntheticSpec) -> list[HybridQuery]:
    return [make_query(index, random_clauses(index, rng, spec), query_embedding_near(index, rng), k) for _ in range(n)]
