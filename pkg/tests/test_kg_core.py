import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbrkg.kg_core import (
    MalformedLineError,
    RelationNameCollision,
    build_graph,
    load_triples,
    loads_triples,
    read_symbol_table,
    write_symbol_table,
)

names = st.sampled_from(["a", "b", "c", "d", "e", "f"])
rels = st.sampled_from(["p", "q", "s"])
triple_lists = st.lists(st.tuples(names, rels, names), max_size=40)


def test_load_single_line():
    assert loads_triples("USA\thas_city\tBoston\n") == [("USA", "has_city", "Boston")]


def test_load_empty():
    assert loads_triples("") == []


def test_load_malformed_reports_line():
    with pytest.raises(MalformedLineError) as err:
        loads_triples("a\tb")
    assert err.value.line == 1


def test_load_malformed_later_line():
    with pytest.raises(MalformedLineError) as err:
        loads_triples("a\tr\tb\n\nx\ty\tz\tw\n")
    assert err.value.line == 3


def test_load_keeps_duplicates_and_order():
    text = "b\tr\tc\na\tr\tb\nb\tr\tc\n"
    assert loads_triples(text) == [("b", "r", "c"), ("a", "r", "b"), ("b", "r", "c")]


def test_load_tail_relation_order():
    assert loads_triples("h\tt\tr\n", fmt="htr") == [("h", "r", "t")]


def test_load_from_path(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("a\tr\tb\r\n", encoding="utf-8")
    assert load_triples(p) == [("a", "r", "b")]


def test_single_edge_closure():
    g = build_graph([("a", "r", "b")])
    assert g.num_entities == 2
    assert g.relations == ["r", "r_inv"]
    named = {(g.entities[h], g.relations[r], g.entities[t]) for h, r, t in g.edge_set()}
    assert named == {("a", "r", "b"), ("b", "r_inv", "a")}


def test_duplicate_triples_stored_once():
    g = build_graph([("a", "r", "b"), ("a", "r", "b")])
    assert len(g) == 2


def test_reserved_suffix_collision():
    with pytest.raises(RelationNameCollision):
        build_graph([("a", "r_inv", "b")])
    # without closure the name is harmless
    assert build_graph([("a", "r_inv", "b")], add_inverses=False).num_relations == 1


def test_successors_and_has_outgoing():
    g = build_graph([("a", "r", "b"), ("a", "r", "c")])
    a, b, c = (g.entity_id(x) for x in "abc")
    r, r_inv = g.relation_id("r"), g.relation_id("r_inv")
    assert g.successors(a, r) == tuple(sorted((b, c)))
    assert g.successors(b, r) == ()
    assert g.successors(b, r_inv) == (a,)
    assert g.has_outgoing(a, r)
    assert not g.has_outgoing(b, r)
    assert g.has_outgoing(b, r_inv)


def test_self_loop_allowed():
    g = build_graph([("a", "r", "a")])
    a = g.entity_id("a")
    assert g.successors(a, g.relation_id("r")) == (a,)
    assert g.successors(a, g.relation_id("r_inv")) == (a,)


def test_inverse_is_involution():
    g = build_graph([("a", "p", "b"), ("b", "q", "c")])
    assert g.num_relations == 2 * g.num_base_relations
    for r in range(g.num_relations):
        assert g.inverse(g.inverse(r)) == r
        assert g.is_inverse(r) != g.is_inverse(g.inverse(r))


def test_symbol_table_round_trip(tmp_path):
    g = build_graph([("x", "p", "y"), ("y", "p", "z")])
    path = tmp_path / "entities.tsv"
    write_symbol_table(path, g.entities)
    assert read_symbol_table(path) == g.entities


@given(triple_lists)
def test_inverse_closure_full_scan(triples):
    g = build_graph(triples)
    edges = g.edge_set()
    for h, r, t in edges:
        assert (t, g.inverse(r), h) in edges


@given(triple_lists)
def test_successors_match_brute_force(triples):
    g = build_graph(triples)
    rows = g.edge_set()
    for e in range(g.num_entities):
        for r in range(g.num_relations):
            expected = sorted(t for h, rr, t in rows if h == e and rr == r)
            assert list(g.successors(e, r)) == expected
            assert g.has_outgoing(e, r) == bool(expected)


@given(triple_lists)
def test_interning_round_trip(triples):
    g = build_graph(triples)
    for i, name in enumerate(g.entities):
        assert g.entity_id(name) == i
    for i, name in enumerate(g.relations):
        assert g.relation_id(name) == i


@settings(max_examples=30)
@given(triple_lists)
def test_construction_is_deterministic(triples):
    text = "".join(f"{h}\t{r}\t{t}\n" for h, r, t in triples)
    g1 = build_graph(load_triples(io.StringIO(text)))
    g2 = build_graph(load_triples(io.StringIO(text)))
    assert g1.entities == g2.entities
    assert g1.relations == g2.relations
    assert g1.triples.tolist() == g2.triples.tolist()
    assert g1.content_hash() == g2.content_hash()
