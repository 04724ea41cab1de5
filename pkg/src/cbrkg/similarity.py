"""Entity similarity: m-hot relation signatures or loaded embeddings, cosine k-NN."""

from __future__ import annotations

import logging
import math
import os
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from .kg_core import KnowledgeGraph

log = logging.getLogger(__name__)

SIGNATURE = "signature"
EXTERNAL = "external"
DIM_MODES = ("closed", "base")


class DimensionMismatch(ValueError):
    pass


class SimilarityIndex:
    """Per-entity vectors with cached norms.

    Signature mode keeps a sparse 0/1 matrix and integer support sizes so that
    ranking can break float near-ties with an exact rational comparison.
    """

    def __init__(self, mode: str, matrix, dim_mode: str = "closed", skipped: int = 0):
        self.mode = mode
        self.dim_mode = dim_mode
        self.matrix = matrix
        self.skipped = skipped
        if mode == SIGNATURE:
            self.counts = np.asarray(matrix.sum(axis=1)).ravel().astype(np.int64)
            self.norms = np.sqrt(self.counts.astype(np.float64))
        else:
            self.counts = None
            self.norms = np.linalg.norm(matrix, axis=1)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_entities(self) -> int:
        return self.matrix.shape[0]

    def vector(self, e: int) -> np.ndarray:
        if self.mode == SIGNATURE:
            return self.matrix[e].toarray().ravel()
        return self.matrix[e]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimilarityIndex):
            return NotImplemented
        if (self.mode, self.dim_mode, self.matrix.shape) != (
            other.mode,
            other.dim_mode,
            other.matrix.shape,
        ):
            return False
        if self.mode == SIGNATURE:
            return (self.matrix != other.matrix).nnz == 0
        return bool(np.array_equal(self.matrix, other.matrix))


def build_signature_index(graph: KnowledgeGraph, dim_mode: str = "closed") -> SimilarityIndex:
    """m-hot vectors: coordinate r is 1 iff the entity has an outgoing r edge.

    ``dim_mode="closed"`` spans the inverse-closed relation set; ``"base"``
    uses base relations only, so an entity seen solely as a tail gets a zero
    vector.
    """
    if dim_mode not in DIM_MODES:
        raise ValueError(f"unknown signature dim mode {dim_mode!r}")
    n = graph.num_entities
    if dim_mode == "closed" or not graph.has_inverses:
        dim = graph.num_relations
        keep = np.ones(len(graph), dtype=bool)
    else:
        dim = graph.num_base_relations
        keep = graph.edge_rel < dim
    heads = graph.triples[keep, 0]
    rels = graph.triples[keep, 1]
    pairs = np.unique(np.stack([heads, rels], axis=1), axis=0) if len(heads) else np.empty((0, 2), np.int64)
    matrix = sp.csr_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, dim), dtype=np.float64
    )
    return SimilarityIndex(SIGNATURE, matrix, dim_mode)


def load_external_index(path: str | os.PathLike, graph: KnowledgeGraph) -> SimilarityIndex:
    """Load ``name<TAB>v1<TAB>...<TAB>vd`` rows as entity vectors.

    Graph entities missing from the file keep a zero vector. Names the graph
    does not know are skipped and counted.
    """
    rows: dict[int, list[float]] = {}
    dim = None
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            name, *values = line.split("\t")
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise DimensionMismatch(f"line {lineno}: row has no vector components")
            elif len(values) != dim:
                raise DimensionMismatch(
                    f"line {lineno}: expected {dim} components, got {len(values)}"
                )
            e = graph.entity_id(name)
            if e is None:
                skipped += 1
                continue
            rows[e] = [float(v) for v in values]
    if skipped:
        log.warning("skipped %d embedding rows for entities not in the graph", skipped)
    matrix = np.zeros((graph.num_entities, dim or 0), dtype=np.float64)
    for e, vec in rows.items():
        matrix[e] = vec
    return SimilarityIndex(EXTERNAL, matrix, skipped=skipped)


def _dots(index: SimilarityIndex, query: int, others: np.ndarray) -> np.ndarray:
    if index.mode == SIGNATURE:
        q = index.matrix[query].T
        return np.asarray((index.matrix[others] @ q).todense()).ravel()
    return index.matrix[others] @ index.matrix[query]


def cosine(index: SimilarityIndex, a: int, b: int) -> float:
    na, nb = index.norms[a], index.norms[b]
    if na == 0 or nb == 0:
        return 0.0
    dot = float(_dots(index, a, np.asarray([b]))[0])
    if index.mode == SIGNATURE:
        return dot / math.sqrt(int(index.counts[a]) * int(index.counts[b]))
    return dot / (na * nb)


def knn_with_relation(
    index: SimilarityIndex,
    graph: KnowledgeGraph,
    query: int,
    r_q: int,
    k: int,
) -> list[tuple[int, float]]:
    """The ``k`` most similar entities having an outgoing ``r_q`` edge.

    Ordered by score descending, then entity id ascending. Zero-norm entities
    are never returned, and a zero-norm query gets an empty list.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = graph.heads_with(r_q)
    if len(pool) == 0 or index.norms[query] == 0:
        return []
    pool = pool[index.norms[pool] > 0]
    if len(pool) == 0:
        return []
    dots = _dots(index, query, pool)

    if index.mode == SIGNATURE:
        cq = int(index.counts[query])
        counts = index.counts[pool]
        scores = dots / np.sqrt((counts * cq).astype(np.float64))
        if len(pool) > k:
            # float pre-filter, then exact ordering among the survivors
            kth = np.partition(-scores, k - 1)[k - 1]
            keep = np.flatnonzero(-scores <= kth + 1e-9)
        else:
            keep = np.arange(len(pool))
        keyed = sorted(
            keep.tolist(),
            key=lambda i: (-Fraction(int(dots[i]) ** 2, int(counts[i]) * cq), int(pool[i])),
        )
        chosen = keyed[:k]
        return [(int(pool[i]), float(scores[i])) for i in chosen]

    scores = dots / (index.norms[pool] * index.norms[query])
    order = np.lexsort((pool, -scores))[:k]
    return [(int(pool[i]), float(scores[i])) for i in order]
