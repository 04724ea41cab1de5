"""Training-free link prediction by case-based reasoning over knowledge graphs."""

from .case_store import (
    CaseStore,
    MemoryStore,
    build_case_store,
    build_memory,
    load_store,
    mine_case_paths,
    sample_subgraph,
    save_store,
)
from .eval import EvalConfig, Metrics, audit_rules, evaluate, rank_of, tune
from .kg_core import KnowledgeGraph, build_graph, load_triples
from .reasoner import Query, QueryResult, ReasonerParams, answer_query, apply_path_type, gather_path_types, retain
from .similarity import SimilarityIndex, build_signature_index, cosine, knn_with_relation, load_external_index

__version__ = "0.1.0"
