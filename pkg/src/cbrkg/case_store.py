"""Sampled subgraphs, per-triple path-type mining and the persisted memory store."""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .kg_core import KnowledgeGraph, PathType
from .similarity import EXTERNAL, SIGNATURE, SimilarityIndex, build_signature_index

log = logging.getLogger(__name__)

Triple = tuple[int, int, int]

MAGIC = b"CBRKGMEM"
FORMAT_VERSION = 1
# magic, version, seed, walks, max_len, index mode, dim mode, graph sha256, body length
_HEADER = struct.Struct("<8sHQIIBB32sQ")


class StoreError(Exception):
    pass


class CorruptStore(StoreError):
    pass


class VersionMismatch(StoreError):
    pass


class GraphHashMismatch(StoreError):
    pass


@dataclass
class SampledSubgraph:
    root: int
    edges: np.ndarray  # (m, 3) unique (h, r, t) rows, sorted

    def edge_set(self) -> set[Triple]:
        return set(map(tuple, self.edges.tolist()))

    def __len__(self) -> int:
        return len(self.edges)


def entity_rng(seed: int, entity: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, entity]))


def sample_slots(graph: KnowledgeGraph, root: int, walks: int, max_len: int, seed: int) -> np.ndarray:
    """Sorted unique CSR edge slots touched by ``walks`` random walks from ``root``.

    Each step picks uniformly among the current node's outgoing edge slots.
    A walk that reaches a sink stops; it still counts against the budget.
    """
    if walks < 0 or max_len < 1:
        raise ValueError("need walks >= 0 and max_len >= 1")
    offsets = graph.offsets
    if walks == 0 or offsets[root + 1] == offsets[root]:
        return np.empty(0, dtype=np.int64)
    rng = entity_rng(seed, root)
    cur = np.full(walks, root, dtype=np.int64)
    taken = []
    for _ in range(max_len):
        lo = offsets[cur]
        deg = offsets[cur + 1] - lo
        alive = deg > 0
        if not alive.all():
            cur, lo, deg = cur[alive], lo[alive], deg[alive]
        if len(cur) == 0:
            break
        slots = lo + (rng.random(len(cur)) * deg).astype(np.int64)
        taken.append(slots)
        cur = graph.edge_tail[slots]
    taken = np.concatenate(taken)
    if len(graph) <= 4 * len(taken):
        return np.flatnonzero(np.bincount(taken, minlength=len(graph)))
    return np.unique(taken)


def sample_subgraph(graph: KnowledgeGraph, root: int, walks: int, max_len: int, seed: int) -> SampledSubgraph:
    slots = sample_slots(graph, root, walks, max_len, seed)
    return SampledSubgraph(root, graph.triples[slots])


def _adjacency(edges: np.ndarray) -> dict[int, list[tuple[int, int]]]:
    adj: dict[int, list[tuple[int, int]]] = {}
    for h, r, t in edges.tolist():
        adj.setdefault(h, []).append((r, t))
    return adj


def types_by_endpoint(subgraph: SampledSubgraph, max_len: int, adj=None) -> dict[int, set[PathType]]:
    """Every path type of length <= max_len from the root, grouped by end entity.

    Expands level by level over distinct (type, entity) pairs rather than
    individual paths, which keeps hub-heavy subgraphs tractable.
    """
    if adj is None:
        adj = _adjacency(subgraph.edges)
    reached: dict[int, set[PathType]] = {}
    layer: dict[PathType, set[int]] = {(): {subgraph.root}}
    for _ in range(max_len):
        nxt: dict[PathType, set[int]] = {}
        for ptype, nodes in layer.items():
            for node in nodes:
                for r, t in adj.get(node, ()):
                    nxt.setdefault(ptype + (r,), set()).add(t)
        for ptype, nodes in nxt.items():
            for node in nodes:
                reached.setdefault(node, set()).add(ptype)
        layer = nxt
    return reached


def _banned_edges(graph: KnowledgeGraph | None, triple: Triple) -> set[Triple]:
    h, r, t = triple
    banned = {(h, r, t)}
    if graph is not None and graph.has_inverses:
        banned.add((t, graph.inverse(r), h))
    return banned


def _reaches(adj, start: int, ptype: PathType, target: int, banned: set[Triple]) -> bool:
    frontier = {start}
    for r in ptype:
        frontier = {
            t for e in frontier for rr, t in adj.get(e, ()) if rr == r and (e, r, t) not in banned
        }
        if not frontier:
            return False
    return target in frontier


def _case_types(adj, reached, graph: KnowledgeGraph | None, triple: Triple) -> tuple[PathType, ...]:
    """Types reaching the tail by some path that avoids the explained edge and its inverse."""
    h, r, t = triple
    banned = _banned_edges(graph, triple)
    risky = {rel for _, rel, _ in banned}
    keep = [
        p
        for p in reached.get(t, ())
        if risky.isdisjoint(p) or _reaches(adj, h, p, t, banned)
    ]
    return sort_types(keep)


def sort_types(types) -> tuple[PathType, ...]:
    return tuple(sorted(types, key=lambda p: (len(p), p)))


def mine_case_paths(
    subgraph: SampledSubgraph,
    triple: Triple,
    max_len: int,
    graph: KnowledgeGraph | None = None,
) -> set[PathType]:
    """Path types in ``subgraph`` leading from the triple's head to its tail.

    Paths that traverse the triple's own edge, or its inverse, do not count;
    this drops the vacuous single-hop rule and its longer echoes such as
    ``r, r_inv, r``. ``graph`` names the inverse relation.
    """
    h, _, t = triple
    if subgraph.root != h:
        raise ValueError("subgraph must be rooted at the triple's head")
    adj = _adjacency(subgraph.edges)
    reached = types_by_endpoint(subgraph, max_len, adj)
    return set(_case_types(adj, reached, graph, triple))


class CaseStore:
    """Map from triple to its mined path types, plus a per-relation triple index."""

    def __init__(self):
        self.cases: dict[Triple, tuple[PathType, ...]] = {}
        self.by_relation: dict[int, list[Triple]] = {}
        self._by_head: dict[tuple[int, int], list[Triple]] = {}

    def __len__(self) -> int:
        return len(self.cases)

    def __contains__(self, triple) -> bool:
        return triple in self.cases

    def __eq__(self, other) -> bool:
        if not isinstance(other, CaseStore):
            return NotImplemented
        return self.cases == other.cases

    def get(self, triple: Triple) -> tuple[PathType, ...]:
        return self.cases.get(triple, ())

    def add(self, triple: Triple, types) -> None:
        triple = tuple(int(x) for x in triple)
        if triple in self.cases:
            types = set(types) | set(self.cases[triple])
        else:
            self.by_relation.setdefault(triple[1], []).append(triple)
            self._by_head.setdefault(triple[:2], []).append(triple)
        self.cases[triple] = sort_types(types)

    def facts(self, head: int, relation: int) -> list[Triple]:
        """Stored triples ``(head, relation, *)``, sorted by tail."""
        return self._by_head.get((head, relation), [])

    def finalize(self) -> None:
        for triples in self.by_relation.values():
            triples.sort()
        for triples in self._by_head.values():
            triples.sort()


@dataclass
class StoreHeader:
    seed: int
    walks: int
    max_len: int
    graph_hash: str
    index_mode: str = SIGNATURE
    dim_mode: str = "closed"
    version: int = FORMAT_VERSION


@dataclass
class MemoryStore:
    cases: CaseStore
    index: SimilarityIndex
    header: StoreHeader
    retained: list[Triple] = field(default_factory=list)


def _mine_root(graph: KnowledgeGraph, root: int, walks: int, max_len: int, seed: int):
    sub = sample_subgraph(graph, root, walks, max_len, seed)
    adj = _adjacency(sub.edges)
    reached = types_by_endpoint(sub, max_len, adj)
    return [
        ((root, r, t), _case_types(adj, reached, graph, (root, r, t)))
        for r, t in graph.out_edges(root)
    ]


_WORKER_STATE: tuple | None = None


def _mine_chunk(roots: list[int]):
    graph, walks, max_len, seed = _WORKER_STATE
    out = []
    for root in roots:
        out.extend(_mine_root(graph, root, walks, max_len, seed))
    return out


def build_case_store(
    graph: KnowledgeGraph,
    walks: int = 1000,
    max_len: int = 3,
    seed: int = 0,
    threads: int = 1,
) -> CaseStore:
    """One case per graph edge, mined from the head's sampled subgraph.

    Walk streams are seeded per (seed, entity), so the result does not depend
    on iteration order or on ``threads``.
    """
    global _WORKER_STATE
    roots = [e for e in range(graph.num_entities) if graph.degree(e) > 0]
    store = CaseStore()
    if threads > 1 and len(roots) > 1 and "fork" in mp.get_all_start_methods():
        _WORKER_STATE = (graph, walks, max_len, seed)
        chunks = [roots[i::threads * 4] for i in range(threads * 4)]
        try:
            with mp.get_context("fork").Pool(threads) as pool:
                results = pool.map(_mine_chunk, chunks)
        finally:
            _WORKER_STATE = None
        pairs = sorted(p for chunk in results for p in chunk)
    else:
        pairs = []
        for root in roots:
            pairs.extend(_mine_root(graph, root, walks, max_len, seed))
    for triple, types in pairs:
        store.add(triple, types)
    store.finalize()
    log.info("built case store: %d cases from %d roots", len(store), len(roots))
    return store


def build_memory(
    graph: KnowledgeGraph,
    walks: int = 1000,
    max_len: int = 3,
    seed: int = 0,
    dim_mode: str = "closed",
    index: SimilarityIndex | None = None,
    threads: int = 1,
) -> MemoryStore:
    if index is None:
        index = build_signature_index(graph, dim_mode)
    cases = build_case_store(graph, walks, max_len, seed, threads)
    header = StoreHeader(
        seed=seed,
        walks=walks,
        max_len=max_len,
        graph_hash=graph.content_hash(),
        index_mode=index.mode,
        dim_mode=index.dim_mode,
    )
    return MemoryStore(cases, index, header)


def _encode_body(memory: MemoryStore) -> bytes:
    cases = memory.cases.cases
    triples = sorted(cases)
    vocab = sort_types({p for types in cases.values() for p in types})
    vocab_id = {p: i for i, p in enumerate(vocab)}

    parts = [struct.pack("<Q", len(vocab))]
    parts.append(np.asarray([len(p) for p in vocab], dtype="<u1").tobytes())
    parts.append(np.asarray([r for p in vocab for r in p], dtype="<i4").tobytes())

    parts.append(struct.pack("<Q", len(triples)))
    parts.append(np.asarray(triples, dtype="<i8").reshape(-1).tobytes())
    parts.append(np.asarray([len(cases[t]) for t in triples], dtype="<i4").tobytes())
    parts.append(
        np.asarray([vocab_id[p] for t in triples for p in cases[t]], dtype="<i4").tobytes()
    )

    parts.append(struct.pack("<Q", len(memory.retained)))
    parts.append(np.asarray(memory.retained, dtype="<i8").reshape(-1).tobytes())

    if memory.index.mode == EXTERNAL:
        m = np.ascontiguousarray(memory.index.matrix, dtype="<f8")
        parts.append(struct.pack("<QQ", *m.shape))
        parts.append(m.tobytes())
    return b"".join(parts)


def save_store(memory: MemoryStore, path: str | os.PathLike) -> None:
    h = memory.header
    body = _encode_body(memory)
    header = _HEADER.pack(
        MAGIC,
        h.version,
        h.seed,
        h.walks,
        h.max_len,
        0 if h.index_mode == SIGNATURE else 1,
        0 if h.dim_mode == "closed" else 1,
        bytes.fromhex(h.graph_hash),
        len(body),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptStore("store body ends early")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype)


def read_header(path: str | os.PathLike) -> StoreHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw)[0]


def _parse_header(raw: bytes) -> tuple[StoreHeader, int]:
    if len(raw) < _HEADER.size:
        raise CorruptStore("file shorter than store header")
    magic, version, seed, walks, max_len, imode, dmode, digest, body_len = _HEADER.unpack(
        raw[: _HEADER.size]
    )
    if magic != MAGIC:
        raise CorruptStore("not a memory store file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"store format version {version}, expected {FORMAT_VERSION}")
    header = StoreHeader(
        seed=seed,
        walks=walks,
        max_len=max_len,
        graph_hash=digest.hex(),
        index_mode=SIGNATURE if imode == 0 else EXTERNAL,
        dim_mode="closed" if dmode == 0 else "base",
        version=version,
    )
    return header, body_len


def load_store(path: str | os.PathLike, graph: KnowledgeGraph) -> MemoryStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, body_len = _parse_header(raw)
    end = _HEADER.size + body_len
    if len(raw) != end + 4:
        raise CorruptStore(f"expected {end + 4} bytes, found {len(raw)}")
    body = raw[_HEADER.size : end]
    if struct.unpack("<I", raw[end:])[0] != zlib.crc32(body):
        raise CorruptStore("checksum mismatch")
    if header.graph_hash != graph.content_hash():
        raise GraphHashMismatch("store was built from a different graph")

    rd = _Reader(body)
    n_types = rd.u64()
    lengths = rd.array("<u1", n_types)
    flat = rd.array("<i4", int(lengths.sum())).tolist()
    vocab = []
    pos = 0
    for n in lengths.tolist():
        vocab.append(tuple(flat[pos : pos + n]))
        pos += n

    n_cases = rd.u64()
    triples = rd.array("<i8", 3 * n_cases).reshape(-1, 3).tolist()
    counts = rd.array("<i4", n_cases).tolist()
    idx = rd.array("<i4", int(sum(counts))).tolist()
    cases = CaseStore()
    pos = 0
    for triple, c in zip(triples, counts):
        cases.add(tuple(triple), [vocab[i] for i in idx[pos : pos + c]])
        pos += c
    cases.finalize()

    n_ret = rd.u64()
    retained = [tuple(t) for t in rd.array("<i8", 3 * n_ret).reshape(-1, 3).tolist()]

    if header.index_mode == EXTERNAL:
        rows, dim = struct.unpack("<QQ", rd.take(16))
        matrix = rd.array("<f8", rows * dim).reshape(rows, dim).copy()
        index = SimilarityIndex(EXTERNAL, matrix)
    else:
        index = build_signature_index(graph, header.dim_mode)
    if rd.pos != len(body):
        raise CorruptStore("trailing bytes in store body")
    return MemoryStore(cases, index, header, retained)
