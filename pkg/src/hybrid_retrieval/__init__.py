"""Full-scan hybrid retrieval: term matching, sign-quantized pre-selection,
exact embedding scoring and bucketized top-k, plus the link learner and the
two-tower model that produce its terms and embeddings."""

from .corpus import DocumentInput, FrozenIndex, IndexBuilder, IndexSchema, build_index, load, save
from .knn import TopKResult, bucket_top_k, exact_scores
from .pipeline import Executor, HybridQuery, QueryOptions, execute, execute_batch, make_query
from .quantizer import make_codec, preselect, quant_score
from .term_match import CNFQuery, QueryError, full_scan_tbr, normalize_query

__version__ = "0.1.0"

__all__ = [
    "CNFQuery",
    "DocumentInput",
    "Executor",
    "FrozenIndex",
    "HybridQuery",
    "IndexBuilder",
    "IndexSchema",
    "QueryError",
    "QueryOptions",
    "TopKResult",
    "bucket_top_k",
    "build_index",
    "exact_scores",
    "execute",
    "execute_batch",
    "full_scan_tbr",
    "load",
    "make_codec",
    "make_query",
    "normalize_query",
    "preselect",
    "quant_score",
    "save",
]
