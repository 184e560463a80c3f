import io
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metakgr import kg
from metakgr.errors import InvalidArgument, ParseError

triple_lists = st.lists(st.tuples(st.integers(0, 7), st.integers(0, 3), st.integers(0, 7)),
                        max_size=40)


def _vocabs(n_entities=8, n_relations=4):
    return kg.Vocab([f"e{i}" for i in range(n_entities)]), kg.Vocab([f"r{i}" for i in range(n_relations)])


def _triples(rows):
    return [kg.Triple(*row) for row in rows]


def test_parse_single_line():
    ents, rels = kg.Vocab(), kg.Vocab()
    assert kg.parse_triples(io.StringIO("a\tr\tb\n"), ents, rels) == [kg.Triple(0, 0, 1)]
    assert ents.names == ["a", "b"] and rels.names == ["r"]


def test_parse_empty_stream():
    assert kg.parse_triples(io.StringIO(""), kg.Vocab(), kg.Vocab()) == []


def test_parse_error_names_line():
    with pytest.raises(ParseError) as info:
        kg.parse_triples(io.StringIO("a\tr\tb\na\tr\n"), kg.Vocab(), kg.Vocab())
    assert info.value.line_number == 2
    assert "line 2" in str(info.value)


def test_parse_first_seen_order():
    ents, rels = kg.Vocab(), kg.Vocab()
    kg.parse_triples(io.StringIO("z\tq\ty\ny\tp\tx\n"), ents, rels)
    assert ents.names == ["z", "y", "x"] and rels.names == ["q", "p"]


def test_build_graph_with_and_without_inverses():
    ents, rels = kg.Vocab(["a", "b"]), kg.Vocab(["r"])
    g = kg.build_graph([kg.Triple(0, 0, 1)], ents, rels, add_inverses=True)
    assert g.adjacency(0).tolist() == [[0, 1]]
    assert g.adjacency(1).tolist() == [[g.inverse(0), 0]]
    assert g.relations.name(g.inverse(0)) == "r" + kg.INVERSE_SUFFIX
    g = kg.build_graph([kg.Triple(0, 0, 1)], ents, rels, add_inverses=False)
    assert g.adjacency(1).tolist() == []


@given(triple_lists)
def test_duplicates_collapse_to_set(rows):
    ents, rels = _vocabs()
    g = kg.build_graph(_triples(rows), ents, rels, add_inverses=False)
    assert sorted(map(tuple, g.edges.tolist())) == sorted(set(rows))


@given(triple_lists)
def test_inverse_edge_count_doubles(rows):
    ents, rels = _vocabs()
    g = kg.build_graph(_triples(rows), ents, rels, add_inverses=True)
    assert len(g.edges) == 2 * len(set(rows))


@given(triple_lists)
def test_adjacency_sorted_and_matches_edges(rows):
    ents, rels = _vocabs()
    g = kg.build_graph(_triples(rows), ents, rels)
    for e in range(g.n_entities):
        adj = [tuple(x) for x in g.adjacency(e).tolist()]
        assert adj == sorted(adj)
        for r, t in adj:
            assert g.has_edge(e, r, t)


def test_reserved_relation_names_rejected():
    ents = kg.Vocab(["a"])
    with pytest.raises(InvalidArgument):
        kg.build_graph([], ents, kg.Vocab(["x" + kg.INVERSE_SUFFIX]))


@settings(max_examples=25, deadline=None)
@given(triple_lists)
def test_graph_round_trip(tmp_path_factory, rows):
    ents, rels = _vocabs()
    g = kg.build_graph(_triples(rows), ents, rels)
    path = tmp_path_factory.mktemp("g") / "graph.ckpt"
    g.save(path)
    h = kg.Graph.load(path)
    assert h.entities == g.entities and h.relations == g.relations
    assert np.array_equal(h.edges, g.edges) and np.array_equal(h.offsets, g.offsets)
    assert h.triples() == g.triples()


def test_dataset_round_trip(tmp_path, chain):
    chain.save(tmp_path / "ds.ckpt")
    back = kg.Dataset.load(tmp_path / "ds.ckpt")
    assert back.entities == chain.entities and back.relations == chain.relations
    assert back.train == chain.train and np.array_equal(back.graph.edges, chain.graph.edges)


def test_load_dataset_assigns_ids_train_valid_test(tmp_path):
    (tmp_path / "train.txt").write_text("a\tr\tb\n")
    (tmp_path / "valid.txt").write_text("c\ts\ta\n")
    (tmp_path / "test.txt").write_text("d\tr\tc\n")
    ds = kg.load_dataset(tmp_path / "train.txt", tmp_path / "valid.txt", tmp_path / "test.txt")
    assert ds.entities.names == ["a", "b", "c", "d"]
    assert ds.relations.names == ["r", "s"]
    assert ds.graph.n_forward == 2


def test_split_boundary_is_strict():
    rows = [(0, 0, i) for i in range(3)] + [(0, 1, i) for i in range(2)]
    split = kg.split_by_frequency(_triples(rows), K=3)
    assert set(split.normal) == {0} and set(split.fewshot) == {1}


def test_split_rejects_zero_threshold():
    with pytest.raises(InvalidArgument):
        kg.split_by_frequency([kg.Triple(0, 0, 1)], K=0)


@given(triple_lists, st.integers(1, 12))
def test_split_is_a_partition(rows, K):
    split = kg.split_by_frequency(_triples(rows), K)
    rels = {r for _, r, _ in rows}
    assert set(split.normal).isdisjoint(split.fewshot)
    assert set(split.normal) | set(split.fewshot) == rels
    union = [t for part in (split.normal, split.fewshot) for ts in part.values() for t in ts]
    assert sorted(union) == sorted(_triples(rows))
    for r, ts in split.fewshot.items():
        assert len(ts) < K


@given(triple_lists, st.integers(1, 12), st.integers(0, 5))
def test_raising_k_never_promotes_fewshot(rows, K, delta):
    low = kg.split_by_frequency(_triples(rows), K)
    high = kg.split_by_frequency(_triples(rows), K + delta)
    assert set(low.fewshot) <= set(high.fewshot)


def test_frequency_report_examples():
    assert kg.relation_frequency_report([kg.Triple(0, 3, 1)]) == {3: 1}
    assert kg.relation_frequency_report([]) == {}


@given(triple_lists)
def test_frequency_counts_sum(rows):
    assert sum(kg.relation_frequency_report(_triples(rows)).values()) == len(rows)


def test_support_query_two_triples():
    task = _triples([(0, 0, 1), (1, 0, 2)])
    ds, dq = kg.sample_support_query(task, 1, 1, np.random.default_rng(0))
    assert sorted(ds + dq) == sorted(task)


def test_support_query_deterministic():
    task = _triples([(i, 0, i + 1) for i in range(10)])
    a = kg.sample_support_query(task, 3, 3, np.random.default_rng(7))
    b = kg.sample_support_query(task, 3, 3, np.random.default_rng(7))
    assert a == b


def test_support_query_coverage():
    task = _triples([(i, 0, i + 1) for i in range(10)])
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(100):
        ds, dq = kg.sample_support_query(task, 3, 3, rng)
        assert set(ds).isdisjoint(dq)
        seen |= set(ds)
    assert seen == set(task)


@given(st.integers(2, 12), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_support_query_disjoint_for_small_tasks(n, s, q, seed):
    task = _triples([(i, 0, i + 1) for i in range(n)])
    ds, dq = kg.sample_support_query(task, s, q, np.random.default_rng(seed))
    assert len(ds) == s and 1 <= len(dq) <= q
    assert set(ds).isdisjoint(dq)


def test_support_query_empty_task():
    with pytest.raises(InvalidArgument):
        kg.sample_support_query([], 1, 1, np.random.default_rng(0))


def test_task_rejects_foreign_relation():
    with pytest.raises(InvalidArgument):
        kg.Task(0, train=[kg.Triple(0, 1, 2)])


def test_random_partition_is_seeded_and_complete():
    rows = _triples([(i, 0, i + 1) for i in range(50)])
    a = kg.random_partition(rows, 0.1, 0.2, np.random.default_rng(3))
    b = kg.random_partition(rows, 0.1, 0.2, np.random.default_rng(3))
    assert a == b
    assert sorted(a[0] + a[1] + a[2]) == sorted(rows)
    assert (len(a[1]), len(a[2])) == (5, 10)


# Published split statistics; the raw files are not shipped, so these run only
# when FB15K237_DIR / NELL995_DIR point at directories holding the
# normal-relation train.txt (FB15k-237) or the full training file (both).
@pytest.mark.skipif("FB15K237_DIR" not in os.environ, reason="FB15k-237 files not available")
def test_fb15k237_statistics():
    root = Path(os.environ["FB15K237_DIR"])
    ents, rels = kg.Vocab(), kg.Vocab()
    normal = kg.read_triples(root / "normal_train.txt", ents, rels)
    assert (len(normal), len(ents), len(rels)) == (268039, 14448, 200)
    full = kg.read_triples(root / "train.txt", kg.Vocab(), kg.Vocab())
    split = kg.split_by_frequency(full, 137)
    assert len(split.fewshot) == 37
    assert sum(len(v) for v in split.fewshot.values()) == 4076
    assert all(len(v) < 137 for v in split.fewshot.values())


@pytest.mark.skipif("NELL995_DIR" not in os.environ, reason="NELL-995 files not available")
def test_nell995_fewshot_count():
    root = Path(os.environ["NELL995_DIR"])
    full = kg.read_triples(root / "train.txt", kg.Vocab(), kg.Vocab())
    assert len(kg.split_by_frequency(full, 114).fewshot) == 30
