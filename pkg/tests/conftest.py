import numpy as np
import pytest

from hybrid_retrieval.bench import SyntheticSpec, synthetic_index
from hybrid_retrieval.corpus import DocumentInput, IndexBuilder
from hybrid_retrieval.quantizer import make_codec


def two_doc_builder(embeddings=((1.0, 0.0), (0.6, 0.8))):
    b = IndexBuilder(2, 5, 2, ("geo", "skill"))
    b.add_document(DocumentInput("doc1", [[934, 2934], [945, 342, 3112]], list(embeddings[0])))
    b.add_document(DocumentInput("doc2", [[129], [9342, 234]], list(embeddings[1])))
    return b


@pytest.fixture
def two_doc_index():
    return two_doc_builder().freeze(make_codec(2, 64, seed=0))


@pytest.fixture(scope="session")
def small_index():
    return synthetic_index(SyntheticSpec(num_docs=3000, dim=16, num_bits=128, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
