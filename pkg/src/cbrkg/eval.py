"""Filtered/raw ranking evaluation, grid tuning and diagnostic analyses."""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .case_store import MemoryStore
from .kg_core import INVERSE_SUFFIX, KnowledgeGraph, PathType, RawTriple
from .reasoner import Query, QueryResult, ReasonerParams, answer_query, gather_path_types
from .similarity import knn_with_relation

log = logging.getLogger(__name__)

DIRECTIONS = ("tail", "head", "both")
PROTOCOLS = ("filtered", "raw")
TIE_POLICIES = ("mean", "optimistic", "pessimistic")


@dataclass
class EvalConfig:
    direction: str = "both"
    protocol: str = "filtered"
    tie_policy: str = "mean"
    hits_cutoffs: tuple[int, ...] = (1, 3, 5, 10)
    params: ReasonerParams = field(default_factory=ReasonerParams)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.tie_policy not in TIE_POLICIES:
            raise ValueError(f"tie_policy must be one of {TIE_POLICIES}")
        cutoffs = tuple(sorted(set(int(n) for n in self.hits_cutoffs)))
        if not cutoffs or cutoffs[0] < 1:
            raise ValueError("hits cutoffs must be positive")
        self.hits_cutoffs = cutoffs


@dataclass
class RankRecord:
    direction: str
    subject: str
    relation: str
    gold: str
    rank: float | None
    support: int
    answers: int
    correct_types: tuple[PathType, ...] = ()


@dataclass
class Metrics:
    hits: dict[int, float]
    mrr: float
    answered_fraction: float
    oracle_hits_at_1: float
    n_queries: int
    unique_correct_paths: dict[str, int] = field(default_factory=dict)
    log: list[RankRecord] = field(default_factory=list)

    def as_rows(self) -> list[tuple[str, float | int]]:
        rows: list[tuple[str, float | int]] = [(f"hits@{n}", v) for n, v in self.hits.items()]
        rows += [
            ("mrr", self.mrr),
            ("answered_fraction", self.answered_fraction),
            ("oracle_hits@1", self.oracle_hits_at_1),
            ("n_queries", self.n_queries),
        ]
        for rel, count in sorted(self.unique_correct_paths.items()):
            rows.append((f"unique_correct_paths[{rel}]", count))
        return rows


def rank_of(
    answers: QueryResult | Sequence[tuple[int, int]],
    gold: int | None,
    known_answers: Iterable[int] = (),
    protocol: str = "filtered",
    tie_policy: str = "mean",
) -> float | None:
    """Rank of ``gold`` among scored answers; ``None`` when it was not retrieved.

    Under the filtered protocol the other known answers are removed first.
    Ties with gold's support are resolved by ``tie_policy``: the mean position
    of the tie block, its first position, or its last.
    """
    if isinstance(answers, QueryResult):
        answers = answers.answers
    scores = dict(answers)
    if gold is None or gold not in scores:
        return None
    known = set(known_answers) - {gold} if protocol == "filtered" else set()
    g = scores[gold]
    better = tied = 0
    for e, s in answers:
        if e == gold or e in known:
            continue
        if s > g:
            better += 1
        elif s == g:
            tied += 1
    if tie_policy == "optimistic":
        return float(better + 1)
    if tie_policy == "pessimistic":
        return float(better + tied + 1)
    return better + (tied + 2) / 2


def metrics_from_ranks(ranks: Sequence[float | None], cutoffs: Sequence[int]) -> tuple[dict[int, float], float]:
    n = len(ranks)
    if n == 0:
        return {c: 0.0 for c in cutoffs}, 0.0
    hits = {c: sum(1 for r in ranks if r is not None and r <= c) / n for c in cutoffs}
    mrr = sum(1.0 / r for r in ranks if r is not None) / n
    return hits, mrr


class AnswerFilter:
    """All known (subject, relation) -> answer names across splits, both directions."""

    def __init__(self, splits: Iterable[Iterable[RawTriple]], suffix: str = INVERSE_SUFFIX):
        self.known: dict[tuple[str, str], set[str]] = {}
        for split in splits:
            for h, r, t in split:
                self.known.setdefault((h, r), set()).add(t)
                self.known.setdefault((t, r + suffix), set()).add(h)

    def ids(self, graph: KnowledgeGraph, subject: str, relation: str) -> set[int]:
        names = self.known.get((subject, relation), ())
        return {i for i in map(graph.entity_id, names) if i is not None}


def expand_queries(test: Iterable[RawTriple], direction: str, suffix: str = INVERSE_SUFFIX):
    """(direction, subject, relation, gold) name tuples; head queries use the inverse relation."""
    out = []
    for h, r, t in test:
        if direction in ("tail", "both"):
            out.append(("tail", h, r, t))
        if direction in ("head", "both"):
            out.append(("head", t, r + suffix, h))
    return out


_POOL_STATE: tuple | None = None


def _pool_call(item):
    fn = _POOL_STATE
    return fn(item)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map; forks worker processes when ``threads > 1``."""
    global _POOL_STATE
    if threads <= 1 or len(items) < 2 or "fork" not in mp.get_all_start_methods():
        return [fn(x) for x in items]
    _POOL_STATE = fn
    try:
        with mp.get_context("fork").Pool(threads) as pool:
            return pool.map(_pool_call, items, chunksize=max(1, len(items) // (threads * 8)))
    finally:
        _POOL_STATE = None


def _score_query(memory, graph, config: EvalConfig, known: AnswerFilter | None, item) -> RankRecord:
    direction, subj, rel, gold = item
    q = Query(graph.entity_id(subj), graph.relation_id(rel))
    result = answer_query(memory, graph, q, config.params)
    gold_id = graph.entity_id(gold)
    filt = known.ids(graph, subj, rel) if known is not None else set()
    rank = rank_of(result, gold_id, filt, config.protocol, config.tie_policy)
    support = dict(result.answers).get(gold_id, 0) if gold_id is not None else 0
    correct = tuple(result.witnesses.get(gold_id, ())) if rank is not None else ()
    return RankRecord(direction, subj, rel, gold, rank, support, len(result), correct)


def summarize(records: Sequence[RankRecord], cutoffs: Sequence[int]) -> Metrics:
    ranks = [rec.rank for rec in records]
    hits, mrr = metrics_from_ranks(ranks, cutoffs)
    n = len(records)
    unique: dict[str, set[PathType]] = {}
    for rec in records:
        unique.setdefault(rec.relation, set()).update(rec.correct_types)
    return Metrics(
        hits=hits,
        mrr=mrr,
        answered_fraction=sum(1 for rec in records if rec.answers > 0) / n if n else 0.0,
        oracle_hits_at_1=sum(1 for r in ranks if r is not None) / n if n else 0.0,
        n_queries=n,
        unique_correct_paths={rel: len(types) for rel, types in unique.items()},
        log=list(records),
    )


def evaluate(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    test: Sequence[RawTriple],
    config: EvalConfig,
    known: AnswerFilter | None = None,
    threads: int = 1,
) -> Metrics:
    """Answer every test query and aggregate hits@N and MRR.

    ``known`` supplies the answers filtered out under the filtered protocol;
    when omitted it is built from ``test`` plus the graph's own edges.
    Unanswered queries and unknown subjects count as reciprocal rank 0.
    """
    if config.protocol == "filtered" and known is None:
        train = [
            (graph.entities[h], graph.relations[r], graph.entities[t])
            for h, r, t in graph.triples.tolist()
            if not graph.is_inverse(r)
        ]
        known = AnswerFilter([train, test])
    items = expand_queries(test, config.direction)
    records = parallel_map(lambda it: _score_query(memory, graph, config, known, it), items, threads)
    return summarize(records, config.hits_cutoffs)


def tune(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    valid: Sequence[RawTriple],
    k_grid: Sequence[int],
    l_grid: Sequence[int],
    config: EvalConfig,
    known: AnswerFilter | None = None,
    threads: int = 1,
) -> tuple[tuple[int, int], list[tuple[int, int, float]]]:
    """Grid search over (k, l) by validation MRR; ties prefer smaller k, then smaller l."""
    if not valid:
        raise ValueError("validation split is empty")
    if not k_grid or not l_grid:
        raise ValueError("tuning grid is empty")
    table = []
    best = None
    best_mrr = -1.0
    base = config.params
    for k in sorted(set(k_grid)):
        for l in sorted(set(l_grid)):
            params = ReasonerParams(
                k=k,
                l=l,
                fanout_cap=base.fanout_cap,
                support=base.support,
                exclude_subject=base.exclude_subject,
            )
            cfg = EvalConfig(config.direction, config.protocol, config.tie_policy, config.hits_cutoffs, params)
            mrr = evaluate(memory, graph, valid, cfg, known, threads).mrr
            table.append((k, l, mrr))
            if mrr > best_mrr:
                best, best_mrr = (k, l), mrr
    return best, table


def count_unique_correct_paths(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    test: Sequence[RawTriple],
    params: ReasonerParams,
    direction: str = "tail",
) -> dict[str, int]:
    """Per query relation, distinct path types that reach the gold answer in some query."""
    cfg = EvalConfig(direction=direction, protocol="raw", params=params)
    metrics = evaluate(memory, graph, test, cfg)
    counts = {rel: 0 for _, _, rel, _ in expand_queries(test, direction)}
    counts.update(metrics.unique_correct_paths)
    return counts


def oracle_hits_at_1(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    test: Sequence[RawTriple],
    params: ReasonerParams,
    direction: str = "both",
) -> float:
    """Fraction of queries whose gold is anywhere in the answer set."""
    cfg = EvalConfig(direction=direction, protocol="raw", params=params)
    return evaluate(memory, graph, test, cfg).oracle_hits_at_1


GoldRule = tuple[tuple[str, ...], str]


def parse_gold_rules(lines: Iterable[str]) -> list[GoldRule]:
    """Parse ``r1,r2 => head`` lines; blank lines and ``#`` comments are skipped."""
    rules = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        body, sep, head = line.partition("=>")
        body_rels = tuple(r.strip() for r in body.split(",") if r.strip())
        if not sep or not head.strip() or not body_rels:
            raise ValueError(f"line {lineno}: expected 'r1,r2 => head', got {line!r}")
        rules.append((body_rels, head.strip()))
    return rules


def load_gold_rules(path: str | os.PathLike) -> list[GoldRule]:
    with open(path, encoding="utf-8") as fh:
        return parse_gold_rules(fh)


@dataclass
class RuleAudit:
    recovered: dict[GoldRule, bool]
    skipped: list[GoldRule]

    @property
    def fraction(self) -> float | None:
        if not self.recovered:
            return None
        return sum(self.recovered.values()) / len(self.recovered)

    def by_relation(self) -> dict[str, bool]:
        out: dict[str, bool] = {}
        for (_, head), ok in self.recovered.items():
            out[head] = out.get(head, False) or ok
        return out

    @property
    def relation_fraction(self) -> float | None:
        rels = self.by_relation()
        if not rels:
            return None
        return sum(rels.values()) / len(rels)


def audit_rules(
    memory: MemoryStore,
    graph: KnowledgeGraph,
    gold_rules: Sequence[GoldRule],
    queries: Sequence[RawTriple],
    params: ReasonerParams,
) -> RuleAudit:
    """Check which gold rule bodies show up among the gathered path types.

    A rule is recovered when its body is among the top-``l`` types gathered
    for at least one query ``(h, head, ?)`` of its head relation.
    """
    gathered: dict[str, set[PathType]] = {}
    recovered: dict[GoldRule, bool] = {}
    skipped: list[GoldRule] = []
    for rule in gold_rules:
        body, head = rule
        ids = [graph.relation_id(r) for r in (*body, head)]
        if any(i is None for i in ids):
            log.warning("skipping rule with unknown relation: %s => %s", ",".join(body), head)
            skipped.append(rule)
            continue
        if head not in gathered:
            types: set[PathType] = set()
            head_id = ids[-1]
            for h, r, _ in queries:
                if r != head:
                    continue
                subject = graph.entity_id(h)
                if subject is None:
                    continue
                neighbors = knn_with_relation(memory.index, graph, subject, head_id, params.k)
                types.update(
                    p for p, _ in gather_path_types(memory.cases, [e for e, _ in neighbors], head_id, params.l)
                )
            gathered[head] = types
        recovered[rule] = tuple(ids[:-1]) in gathered[head]
    return RuleAudit(recovered, skipped)


def write_rank_log(path: str | os.PathLike, records: Sequence[RankRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("direction\tsubject\trelation\tgold\trank\tsupport\tanswers\n")
        for rec in records:
            rank = "-" if rec.rank is None else repr(rec.rank)
            fh.write(
                f"{rec.direction}\t{rec.subject}\t{rec.relation}\t{rec.gold}\t{rank}\t{rec.support}\t{rec.answers}\n"
            )


def read_rank_log(path: str | os.PathLike) -> list[float | None]:
    ranks = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            field_ = line.rstrip("\n").split("\t")[4]
            ranks.append(None if field_ == "-" else float(field_))
    return ranks


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(
    path: str | os.PathLike,
    rows: Sequence[tuple[str, object]],
    config_echo: Sequence[tuple[str, object]],
) -> None:
    """Plain-text report: ``# config`` echo lines, then ``name<TAB>value`` rows."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in config_echo:
            fh.write(f"# config\t{key}\t{value}\n")
        for name, value in rows:
            fh.write(f"{name}\t{format_value(value)}\n")


def read_report(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, str]]:
    config, values = {}, {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# config\t"):
                _, key, value = line.split("\t", 2)
                config[key] = value
            elif line:
                name, value = line.split("\t", 1)
                values[name] = value
    return config, values
