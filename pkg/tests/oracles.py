"""Independent brute-force references used by the tests."""

import numpy as np


def doc_clauses(index, row):
    return [set(index.clause_slice(row, c).tolist()) for c in range(index.num_clauses)]


def matches(index, row, raw_clauses):
    """CNF match by Python sets; raw_clauses maps slot -> ids."""
    clauses = doc_clauses(index, row)
    return all(clauses[slot] & set(ids) for slot, ids in raw_clauses.items())


def brute_force(index, raw_clauses, q, k):
    """Filter, score every survivor with a Python dot product, sort by (-score, row)."""
    q = np.asarray(q, float)
    q = q / np.linalg.norm(q)
    scored = []
    for row in range(index.num_docs):
        if matches(index, row, raw_clauses):
            emb = index.embeddings[row]
            scored.append((sum(float(a) * float(b) for a, b in zip(emb, q)), row))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored[:k]


def slot_clauses(index, named):
    return {index.clause_slot(k): v for k, v in named.items()}
