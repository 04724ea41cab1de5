"""Command-line entry point: build-store, query, evaluate, tune, audit-rules, datasets."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

from . import plotting
from .case_store import StoreError, build_memory, load_store, save_store
from .eval import (
    AnswerFilter,
    EvalConfig,
    audit_rules,
    evaluate,
    load_gold_rules,
    tune,
    write_rank_log,
    write_report,
)
from .kg_core import (
    MalformedLineError,
    RelationNameCollision,
    build_graph,
    load_triples,
    write_symbol_table,
)
from .reasoner import Query, ReasonerParams, answer_query
from .similarity import DimensionMismatch, load_external_index

log = logging.getLogger("cbrkg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATASETS = {
    "wn18rr": "WN18RR.tar.gz in https://github.com/TimDettmers/ConvE",
    "nell-995": "NELL-995 release linked from https://github.com/xwhan/DeepPath",
    "fb122": "FB122 (with its rule file) from the KALE release; no stable URL is bundled",
}


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


@dataclass
class RunConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    store: str | None = None
    rules: str | None = None
    embeddings: str | None = None
    report: str | None = None
    format: str = "hrt"
    walks: int = 1000
    max_path_len: int = 3
    seed: int = 0
    signature_dim_mode: str = "closed"
    k: int = 5
    l: int = 20
    fanout_cap: int = 1000  # 0 = unbounded
    support: str = "types"
    direction: str = "both"
    protocol: str = "filtered"
    tie_policy: str = "mean"
    hits: str = "1,3,5,10"
    k_grid: str = "1,3,5,10"
    l_grid: str = "5,10,20,50"
    relations: str | None = None
    top: int = 10
    figures: bool = True
    threads: int = os.cpu_count() or 1

    def reasoner_params(self) -> ReasonerParams:
        return ReasonerParams(
            k=self.k,
            l=self.l,
            fanout_cap=self.fanout_cap or None,
            support=self.support,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            direction=self.direction,
            protocol=self.protocol,
            tie_policy=self.tie_policy,
            hits_cutoffs=parse_int_list(self.hits, "hits"),
            params=self.reasoner_params(),
        )

    def echo(self) -> list[tuple[str, object]]:
        # threads never changes results, so it stays out of reports
        return [(k, v) for k, v in asdict(self).items() if k != "threads"]


_FIELD_TYPES = {
    f.name: (int if "int" in f.type else bool if "bool" in f.type else str) for f in fields(RunConfig)
}


def parse_int_list(text: str, name: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated integers, got {text!r}") from None


def _convert(key: str, raw: str, where: str):
    kind = _FIELD_TYPES[key]
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: {key} expects an integer, got {raw!r}") from None
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: {key} expects a boolean, got {raw!r}")
    return raw


def read_config_file(path: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment line."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _convert(key, raw.strip(), f"{path}:{lineno}")
    return values


def load_config(path: str | None = None, flags: dict | None = None) -> RunConfig:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    merged = {}
    if path:
        merged.update(read_config_file(path))
    for key, value in (flags or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    return RunConfig(**merged)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbrkg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data=("train",)):
        p.add_argument("--config", default=None, help="flat key=value config file")
        for name in data:
            _add(p, f"--{name}", metavar="FILE")
        _add(p, "--format", choices=("hrt", "htr"), help="triple column order")
        _add(p, "--threads", type=int)

    def reasoner(p):
        _add(p, "--k", type=int, help="neighbours retrieved")
        _add(p, "--l", type=int, help="path-type budget")
        _add(p, "--fanout-cap", dest="fanout_cap", type=int, help="0 = unbounded")
        _add(p, "--support", choices=("types", "paths"))

    def store_build(p):
        _add(p, "--walks", type=int)
        _add(p, "--max-path-len", dest="max_path_len", type=int)
        _add(p, "--seed", type=int)
        _add(p, "--signature-dim-mode", dest="signature_dim_mode", choices=("closed", "base"))
        _add(p, "--embeddings", metavar="FILE")

    p = sub.add_parser("build-store", help="precompute the case store and similarity index")
    common(p)
    store_build(p)
    _add(p, "--out", dest="store", metavar="FILE")
    _add(p, "--report", metavar="FILE")

    p = sub.add_parser("query", help="answer one (subject, relation, ?) query")
    common(p)
    store_build(p)
    reasoner(p)
    _add(p, "--store", metavar="FILE")
    p.add_argument("--subject", required=True)
    p.add_argument("--relation", required=True)
    _add(p, "--top", type=int)
    p.add_argument("--output", choices=("tsv", "record"), default="tsv")

    p = sub.add_parser("evaluate", help="hits@N / MRR over a test split")
    common(p, ("train", "valid", "test"))
    reasoner(p)
    _add(p, "--store", metavar="FILE")
    _add(p, "--direction", choices=("tail", "head", "both"))
    _add(p, "--protocol", choices=("filtered", "raw"))
    _add(p, "--tie-policy", dest="tie_policy", choices=("mean", "optimistic", "pessimistic"))
    _add(p, "--hits", help="comma-separated cutoffs")
    _add(p, "--relations", help="comma-separated relation filter (e.g. a few-shot subset)")
    _add(p, "--report", metavar="FILE")
    _add(p, "--figures", type=lambda s: _convert("figures", s, "--figures"))

    p = sub.add_parser("tune", help="grid search k and l on the validation split")
    common(p, ("train", "valid", "test"))
    reasoner(p)
    _add(p, "--store", metavar="FILE")
    _add(p, "--direction", choices=("tail", "head", "both"))
    _add(p, "--protocol", choices=("filtered", "raw"))
    _add(p, "--tie-policy", dest="tie_policy", choices=("mean", "optimistic", "pessimistic"))
    _add(p, "--k-grid", dest="k_grid")
    _add(p, "--l-grid", dest="l_grid")
    _add(p, "--report", metavar="FILE")
    _add(p, "--figures", type=lambda s: _convert("figures", s, "--figures"))

    p = sub.add_parser("audit-rules", help="check recovery of known rules")
    common(p, ("train", "valid"))
    reasoner(p)
    _add(p, "--store", metavar="FILE")
    _add(p, "--rules", metavar="FILE", help="one 'r1,r2 => head' rule per line")
    _add(p, "--report", metavar="FILE")

    p = sub.add_parser("export-symbols", help="write entity/relation id tables as TSV")
    common(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("datasets", help="list dataset sources or verify a download")
    p.add_argument("--verify", metavar="FILE")
    p.add_argument("--sha256", metavar="HEX")
    return parser


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _echo_config(cfg: RunConfig) -> None:
    for key, value in asdict(cfg).items():
        print(f"# config\t{key}\t{value}", file=sys.stderr)


def _load_graph(cfg: RunConfig):
    train = load_triples(cfg.train, cfg.format)
    return train, build_graph(train)


def _load_memory(cfg: RunConfig, graph):
    if cfg.store:
        return load_store(cfg.store, graph)
    log.info("no --store given; building the memory in-process")
    return _build(cfg, graph)


def _build(cfg: RunConfig, graph):
    index = load_external_index(cfg.embeddings, graph) if cfg.embeddings else None
    return build_memory(
        graph,
        walks=cfg.walks,
        max_len=cfg.max_path_len,
        seed=cfg.seed,
        dim_mode=cfg.signature_dim_mode,
        index=index,
        threads=cfg.threads,
    )


def cmd_build_store(cfg: RunConfig) -> int:
    _require(cfg, "train", "store")
    _, graph = _load_graph(cfg)
    memory = _build(cfg, graph)
    save_store(memory, cfg.store)
    n_types = sum(len(v) for v in memory.cases.cases.values())
    rows = [
        ("entities", graph.num_entities),
        ("relations", graph.num_relations),
        ("edges", len(graph)),
        ("cases", len(memory.cases)),
        ("case_path_types", n_types),
        ("graph_hash", memory.header.graph_hash),
    ]
    if cfg.report:
        write_report(cfg.report, rows, cfg.echo())
    for name, value in rows:
        print(f"{name}\t{value}")
    return EXIT_OK


def cmd_query(cfg: RunConfig, subject: str, relation: str, output: str) -> int:
    _require(cfg, "train")
    _, graph = _load_graph(cfg)
    memory = _load_memory(cfg, graph)
    q = Query(graph.entity_id(subject), graph.relation_id(relation))
    if q.relation is None:
        log.warning("relation %r not in the graph", relation)
    result = answer_query(memory, graph, q, cfg.reasoner_params())
    top = result.answers[: cfg.top]
    if output == "tsv":
        print("rank\tentity\tsupport")
        for i, (e, s) in enumerate(top, start=1):
            print(f"{i}\t{graph.entities[e]}\t{s}")
    else:
        names = graph.path_type_names
        record = {
            "subject": subject,
            "relation": relation,
            "answers": [
                {"rank": i, "entity": graph.entities[e], "support": s,
                 "paths": [names(p) for p in result.witnesses[e]]}
                for i, (e, s) in enumerate(top, start=1)
            ],
            "neighbors": [{"entity": graph.entities[e], "score": sc} for e, sc in result.neighbors],
            "path_types_tried": [{"path": names(p), "count": c} for p, c in result.tried],
            "path_types_matched": [names(p) for p in result.matched],
        }
        print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _eval_inputs(cfg: RunConfig, split: str):
    train, graph = _load_graph(cfg)
    memory = _load_memory(cfg, graph)
    splits = {"train": train}
    for name in ("valid", "test"):
        path = getattr(cfg, name)
        splits[name] = load_triples(path, cfg.format) if path else []
    known = AnswerFilter(splits.values())
    queries = splits[split]
    if cfg.relations:
        keep = {r.strip() for r in cfg.relations.split(",")}
        queries = [t for t in queries if t[1] in keep]
    return graph, memory, known, queries


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "train", "test", "store")
    config = cfg.eval_config()
    graph, memory, known, test = _eval_inputs(cfg, "test")
    metrics = evaluate(memory, graph, test, config, known, cfg.threads)
    rows = metrics.as_rows()
    for name, value in rows[: len(metrics.hits) + 4]:
        print(f"{name}\t{value}")
    if cfg.report:
        write_report(cfg.report, rows, cfg.echo())
        write_rank_log(plotting.figure_path(cfg.report, "ranks").replace(".png", ".tsv"), metrics.log)
        if cfg.figures:
            plotting.plot_hits_curve(metrics.hits, metrics.mrr, plotting.figure_path(cfg.report, "hits"))
            plotting.plot_rank_histogram([r.rank for r in metrics.log], plotting.figure_path(cfg.report, "rank_hist"))
            if metrics.unique_correct_paths:
                plotting.plot_unique_paths(metrics.unique_correct_paths, plotting.figure_path(cfg.report, "paths"))
    return EXIT_OK


def cmd_tune(cfg: RunConfig) -> int:
    _require(cfg, "train", "valid", "store")
    graph, memory, known, valid = _eval_inputs(cfg, "valid")
    if not valid:
        raise ValueError("validation split is empty")
    (k, l), table = tune(
        memory, graph, valid,
        parse_int_list(cfg.k_grid, "k_grid"), parse_int_list(cfg.l_grid, "l_grid"),
        cfg.eval_config(), known, cfg.threads,
    )
    rows = [(f"mrr[k={kk},l={ll}]", mrr) for kk, ll, mrr in table]
    rows += [("best_k", k), ("best_l", l)]
    for name, value in rows[-2:]:
        print(f"{name}\t{value}")
    if cfg.report:
        write_report(cfg.report, rows, cfg.echo())
        if cfg.figures:
            plotting.plot_tuning_grid(table, plotting.figure_path(cfg.report, "grid"))
    return EXIT_OK


def cmd_audit_rules(cfg: RunConfig) -> int:
    _require(cfg, "train", "valid", "store", "rules")
    graph, memory, _, valid = _eval_inputs(cfg, "valid")
    audit = audit_rules(memory, graph, load_gold_rules(cfg.rules), valid, cfg.reasoner_params())
    na = "n/a"
    rows = [
        ("rules", len(audit.recovered)),
        ("rules_skipped", len(audit.skipped)),
        ("rule_recovery", na if audit.fraction is None else audit.fraction),
        ("relation_recovery", na if audit.relation_fraction is None else audit.relation_fraction),
    ]
    rows += [(f"recovered[{head}]", int(ok)) for head, ok in sorted(audit.by_relation().items())]
    for name, value in rows[:4]:
        print(f"{name}\t{value}")
    if cfg.report:
        write_report(cfg.report, rows, cfg.echo())
    return EXIT_OK


def cmd_datasets(verify: str | None, sha256: str | None) -> int:
    if verify:
        if not sha256:
            raise UsageError("--verify needs --sha256")
        digest = hashlib.sha256()
        with open(verify, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                digest.update(block)
        ok = digest.hexdigest() == sha256.lower()
        print(f"{verify}\t{digest.hexdigest()}\t{'ok' if ok else 'MISMATCH'}")
        return EXIT_OK if ok else EXIT_DATA
    for name, source in DATASETS.items():
        print(f"{name}\t{source}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.command == "datasets":
            return cmd_datasets(args.verify, args.sha256)

        flags = {
            k: v for k, v in vars(args).items()
            if k not in ("command", "config", "verbose", "subject", "relation", "output", "out_dir")
        }
        cfg = load_config(args.config, flags)
        _echo_config(cfg)
        if args.command == "build-store":
            return cmd_build_store(cfg)
        if args.command == "query":
            return cmd_query(cfg, args.subject, args.relation, args.output)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "tune":
            return cmd_tune(cfg)
        if args.command == "audit-rules":
            return cmd_audit_rules(cfg)
        if args.command == "export-symbols":
            _require(cfg, "train")
            _, graph = _load_graph(cfg)
            os.makedirs(args.out_dir, exist_ok=True)
            write_symbol_table(os.path.join(args.out_dir, "entities.tsv"), graph.entities)
            write_symbol_table(os.path.join(args.out_dir, "relations.tsv"), graph.relations)
            return EXIT_OK
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MalformedLineError, RelationNameCollision, DimensionMismatch, StoreError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
