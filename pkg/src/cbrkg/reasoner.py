"""Query answering: retrieve neighbours, reuse their path types, re-apply from the subject."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .case_store import CaseStore, MemoryStore
from .kg_core import KnowledgeGraph, PathType
from .similarity import knn_with_relation

log = logging.getLogger(__name__)

SUPPORT_MODES = ("types", "paths")


class UnsoundRetain(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    subject: int | None
    relation: int | None


@dataclass
class ReasonerParams:
    k: int = 5
    l: int = 20
    fanout_cap: int | None = 1000  # None: unbounded
    retain_enabled: bool = False
    support: str = "types"
    exclude_subject: bool = True

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise ValueError("k and l must be >= 1")
        if self.fanout_cap is not None and self.fanout_cap < 1:
            raise ValueError("fanout_cap must be >= 1 or None")
        if self.support not in SUPPORT_MODES:
            raise ValueError(f"support must be one of {SUPPORT_MODES}")


@dataclass
class QueryResult:
    answers: list[tuple[int, int]] = field(default_factory=list)
    witnesses: dict[int, list[PathType]] = field(default_factory=dict)
    neighbors: list[tuple[int, float]] = field(default_factory=list)
    tried: list[tuple[PathType, int]] = field(default_factory=list)
    matched: list[PathType] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.answers)

    def entities(self) -> list[int]:
        return [e for e, _ in self.answers]

    def rank_of(self, entity: int) -> int | None:
        for i, (e, _) in enumerate(self.answers, start=1):
            if e == entity:
                return i
        return None


def type_order(item: tuple[PathType, int]):
    ptype, count = item
    return (-count, len(ptype), ptype)


def gather_path_types(
    store: CaseStore,
    neighbors: Iterable[int],
    r_q: int,
    l: int,
) -> list[tuple[PathType, int]]:
    """Top-``l`` path types over all cases ``(e', r_q, e'')`` of the neighbours.

    A type's count is the number of cases holding it. Ties go to shorter
    types, then lexicographic relation ids.
    """
    counts: Counter[PathType] = Counter()
    for e in neighbors:
        for triple in store.facts(e, r_q):
            counts.update(store.get(triple))
    return sorted(counts.items(), key=type_order)[:l]


def apply_path_type(
    graph: KnowledgeGraph,
    start: int,
    ptype: Sequence[int],
    fanout_cap: int | None = None,
    exclude_start: bool = True,
) -> set[int]:
    """Entities reached from ``start`` by following the relations of ``ptype``.

    After each hop the frontier keeps its ``fanout_cap`` smallest ids.
    """
    frontier = [start]
    for r in ptype:
        nxt = set()
        for e in frontier:
            nxt.update(graph.successors(e, r))
        if not nxt:
            return set()
        frontier = sorted(nxt)
        if fanout_cap is not None and len(frontier) > fanout_cap:
            frontier = frontier[:fanout_cap]
    reached = set(frontier)
    if exclude_start:
        reached.discard(start)
    return reached


def count_groundings(
    graph: KnowledgeGraph,
    start: int,
    ptype: Sequence[int],
    fanout_cap: int | None = None,
    exclude_start: bool = True,
) -> dict[int, int]:
    """Like :func:`apply_path_type` but counts path instantiations per end entity."""
    frontier = {start: 1}
    for r in ptype:
        nxt: Counter[int] = Counter()
        for e, c in frontier.items():
            for t in graph.successors(e, r):
                nxt[t] += c
        if not nxt:
            return {}
        keep = sorted(nxt)
        if fanout_cap is not None and len(keep) > fanout_cap:
            keep = keep[:fanout_cap]
        frontier = {e: nxt[e] for e in keep}
    if exclude_start:
        frontier.pop(start, None)
    return frontier


def answer_query(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    query: Query,
    params: ReasonerParams,
) -> QueryResult:
    result = QueryResult()
    subject, r_q = query.subject, query.relation
    if subject is None or r_q is None:
        return result
    if subject >= graph.num_entities or graph.degree(subject) == 0:
        return result

    result.neighbors = knn_with_relation(memory.index, graph, subject, r_q, params.k)
    if not result.neighbors:
        return result
    result.tried = gather_path_types(
        memory.cases, [e for e, _ in result.neighbors], r_q, params.l
    )

    support: Counter[int] = Counter()
    for ptype, _ in result.tried:
        if params.support == "types":
            reached = apply_path_type(
                graph, subject, ptype, params.fanout_cap, params.exclude_subject
            )
            for e in reached:
                support[e] += 1
        else:
            grounded = count_groundings(
                graph, subject, ptype, params.fanout_cap, params.exclude_subject
            )
            reached = grounded.keys()
            for e, c in grounded.items():
                support[e] += c
        if reached:
            result.matched.append(ptype)
            for e in reached:
                result.witnesses.setdefault(e, []).append(ptype)

    result.answers = sorted(support.items(), key=lambda item: (-item[1], item[0]))
    return result


def retain(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    query: Query,
    gold: int,
    matched_types: Sequence[PathType],
    params: ReasonerParams,
) -> MemoryStore:
    """Add the solved query as a new case, after checking every type reaches ``gold``."""
    if not params.retain_enabled:
        log.warning("retain called with retain_enabled=False; ignoring")
        return memory
    for ptype in matched_types:
        if gold not in apply_path_type(graph, query.subject, ptype, None, exclude_start=False):
            raise UnsoundRetain(
                f"path type {graph.path_type_names(ptype)} does not connect the subject to the answer"
            )
    triple = (query.subject, query.relation, gold)
    memory.cases.add(triple, matched_types)
    memory.cases.finalize()
    memory.retained.append(triple)
    return memory
