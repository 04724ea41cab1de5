"""Triple loading, symbol interning and the inverse-closed multigraph."""

from __future__ import annotations

import hashlib
import io
import os
from typing import Iterable, Sequence, TextIO

import numpy as np

INVERSE_SUFFIX = "_inv"

RawTriple = tuple[str, str, str]
PathType = tuple[int, ...]

FIELD_ORDERS = ("hrt", "htr")


class MalformedLineError(ValueError):
    def __init__(self, line: int, text: str):
        super().__init__(f"line {line}: expected 3 tab-separated fields, got {text!r}")
        self.line = line


class RelationNameCollision(ValueError):
    pass


def load_triples(source: str | os.PathLike | TextIO, fmt: str = "hrt") -> list[RawTriple]:
    """Read tab-separated triples.

    ``fmt`` names the column order: ``"hrt"`` (head, relation, tail) or
    ``"htr"`` (head, tail, relation). Blank lines are skipped; triples are
    returned in file order without deduplication.
    """
    if fmt not in FIELD_ORDERS:
        raise ValueError(f"unknown field order {fmt!r}, expected one of {FIELD_ORDERS}")
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return load_triples(fh, fmt)

    triples = []
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or not all(fields):
            raise MalformedLineError(lineno, line)
        if fmt == "hrt":
            h, r, t = fields
        else:
            h, t, r = fields
        triples.append((h, r, t))
    return triples


def loads_triples(text: str, fmt: str = "hrt") -> list[RawTriple]:
    return load_triples(io.StringIO(text), fmt)


class KnowledgeGraph:
    """Immutable directed labeled multigraph over interned ids.

    Edges are held in a CSR layout sorted by (head, relation, tail), so the
    outgoing edge slots of entity ``e`` are ``offsets[e]:offsets[e + 1]``.
    When built with inverse closure, base relations take ids ``0..R-1`` and
    the inverse of relation ``r`` is ``r + R``.
    """

    def __init__(
        self,
        entities: list[str],
        relations: list[str],
        inverse_of: list[int] | None,
        triples: np.ndarray,
    ):
        self.entities = entities
        self.relations = relations
        self.entity_index = {name: i for i, name in enumerate(entities)}
        self.relation_index = {name: i for i, name in enumerate(relations)}
        self._inverse_of = inverse_of

        # unique rows, sorted by (h, r, t)
        self.triples = triples
        self.triples.setflags(write=False)
        n = len(entities)
        heads = triples[:, 0]
        self.offsets = np.searchsorted(heads, np.arange(n + 1), side="left").astype(np.int64)
        self.edge_rel = np.ascontiguousarray(triples[:, 1])
        self.edge_tail = np.ascontiguousarray(triples[:, 2])

        self._adj: dict[tuple[int, int], tuple[int, ...]] = {}
        masks = [0] * n
        heads_of: dict[int, list[int]] = {}
        for e in range(n):
            lo, hi = int(self.offsets[e]), int(self.offsets[e + 1])
            if lo == hi:
                continue
            rels = self.edge_rel[lo:hi]
            tails = self.edge_tail[lo:hi]
            bounds = np.flatnonzero(np.diff(rels)) + 1
            for seg_r, seg_t in zip(np.split(rels, bounds), np.split(tails, bounds)):
                r = int(seg_r[0])
                self._adj[(e, r)] = tuple(seg_t.tolist())
                masks[e] |= 1 << r
                heads_of.setdefault(r, []).append(e)
        self._out_mask = masks
        self._heads_of = {
            r: np.asarray(es, dtype=np.int64) for r, es in heads_of.items()
        }
        self._hash: str | None = None

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_base_relations(self) -> int:
        if self._inverse_of is None:
            return len(self.relations)
        return len(self.relations) // 2

    @property
    def has_inverses(self) -> bool:
        return self._inverse_of is not None

    def __len__(self) -> int:
        return len(self.triples)

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(entities={self.num_entities}, "
            f"relations={self.num_relations}, edges={len(self)})"
        )

    def inverse(self, r: int) -> int:
        if self._inverse_of is None:
            raise ValueError("graph was built without inverse closure")
        return self._inverse_of[r]

    def is_inverse(self, r: int) -> bool:
        return self._inverse_of is not None and r >= self.num_base_relations

    def base(self, r: int) -> int:
        return r - self.num_base_relations if self.is_inverse(r) else r

    def successors(self, e: int, r: int) -> tuple[int, ...]:
        return self._adj.get((e, r), ())

    def has_outgoing(self, e: int, r: int) -> bool:
        return bool((self._out_mask[e] >> r) & 1)

    def out_relations(self, e: int) -> list[int]:
        mask = self._out_mask[e]
        out = []
        r = 0
        while mask:
            if mask & 1:
                out.append(r)
            mask >>= 1
            r += 1
        return out

    def heads_with(self, r: int) -> np.ndarray:
        """Sorted entities having at least one outgoing ``r`` edge."""
        return self._heads_of.get(r, np.empty(0, dtype=np.int64))

    def degree(self, e: int) -> int:
        return int(self.offsets[e + 1] - self.offsets[e])

    def out_edges(self, e: int) -> list[tuple[int, int]]:
        lo, hi = int(self.offsets[e]), int(self.offsets[e + 1])
        return list(zip(self.edge_rel[lo:hi].tolist(), self.edge_tail[lo:hi].tolist()))

    def contains(self, h: int, r: int, t: int) -> bool:
        return t in self.successors(h, r)

    def edge_set(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.triples.tolist()))

    def entity_id(self, name: str) -> int | None:
        return self.entity_index.get(name)

    def relation_id(self, name: str) -> int | None:
        return self.relation_index.get(name)

    def path_type_names(self, path_type: Sequence[int]) -> list[str]:
        return [self.relations[r] for r in path_type]

    def content_hash(self) -> str:
        """SHA-256 over symbol tables and the edge array; ties stores to graphs."""
        if self._hash is None:
            h = hashlib.sha256()
            for table in (self.entities, self.relations):
                h.update(len(table).to_bytes(8, "little"))
                for name in table:
                    data = name.encode("utf-8")
                    h.update(len(data).to_bytes(4, "little"))
                    h.update(data)
            h.update(b"inv" if self.has_inverses else b"raw")
            h.update(np.ascontiguousarray(self.triples, dtype="<i8").tobytes())
            self._hash = h.hexdigest()
        return self._hash


def build_graph(
    triples: Iterable[RawTriple],
    add_inverses: bool = True,
    inverse_suffix: str = INVERSE_SUFFIX,
) -> KnowledgeGraph:
    """Intern symbols in first-appearance order and build the graph.

    Identical triples are stored once. With ``add_inverses`` every edge
    ``(h, r, t)`` also yields ``(t, r + inverse_suffix, h)``.
    """
    entity_index: dict[str, int] = {}
    relation_index: dict[str, int] = {}
    rows = []
    for h, r, t in triples:
        if add_inverses and r.endswith(inverse_suffix):
            raise RelationNameCollision(
                f"relation {r!r} already ends with reserved suffix {inverse_suffix!r}"
            )
        hi = entity_index.setdefault(h, len(entity_index))
        ri = relation_index.setdefault(r, len(relation_index))
        ti = entity_index.setdefault(t, len(entity_index))
        rows.append((hi, ri, ti))

    entities = list(entity_index)
    relations = list(relation_index)
    edges = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    inverse_of = None
    if add_inverses:
        nb = len(relations)
        relations = relations + [name + inverse_suffix for name in relations]
        inverse_of = [r + nb for r in range(nb)] + list(range(nb))
        flipped = np.stack([edges[:, 2], edges[:, 1] + nb, edges[:, 0]], axis=1)
        edges = np.concatenate([edges, flipped])
    if len(edges):
        edges = np.unique(edges, axis=0)  # lexicographic sort + dedup
    return KnowledgeGraph(entities, relations, inverse_of, edges)


def write_symbol_table(path: str | os.PathLike, names: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            fh.write(f"{i}\t{name}\n")


def read_symbol_table(path: str | os.PathLike) -> list[str]:
    names = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            idx, _, name = line.partition("\t")
            if int(idx) != len(names):
                raise ValueError(f"line {lineno}: symbol ids must be contiguous")
            names.append(name)
    return names
