import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cattransfer.graph import (GraphInputError, SemanticGraph, build_graph, co_occurrence,
                               combine_edges, handcrafted_edges, read_embedding_file,
                               read_relation_file, similarity_edges, threshold,
                               write_embedding_file, write_relation_file)
from oracles import brute_force, random_label_sets


def test_cooccurrence_matches_oracle_on_100_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        sets, c = random_label_sets(rng)
        tm = co_occurrence(sets, c)
        m, mij, P = brute_force(sets, c)
        assert tm.counts.tolist() == m
        assert tm.pair_counts.tolist() == mij
        for i in range(c):
            for j in range(c):
                assert tm.exact(i, j) == P[i][j]
                assert tm.P[i, j] == float(P[i][j])


def test_threshold_monotone_on_100_instances():
    rng = np.random.default_rng(2025)
    taus = [0.05, 0.2, 0.4, 0.5, 0.75, 1.0]
    for _ in range(100):
        sets, c = random_label_sets(rng)
        tm = co_occurrence(sets, c)
        As = [threshold(tm, t).A for t in taus]
        for lo, hi in zip(As, As[1:]):
            assert np.all(hi <= lo)
        for i in range(c):
            if tm.counts[i] > 0:
                assert all(A[i, i] == 1 for A in As)


def test_cooccurrence_examples():
    tm = co_occurrence([{0}, {0, 1}, {0, 1}, {0}], 2)
    assert tm.counts.tolist() == [4, 2] and tm.pair_counts[0, 1] == 2
    assert tm.P[0, 1] == 0.5 and tm.P[1, 0] == 1.0
    assert tm.P[0, 1] != tm.P[1, 0]  # digraph
    assert np.array_equal(co_occurrence([{0, 1}], 2).P, np.ones((2, 2)))
    assert np.array_equal(co_occurrence([{0}], 3).P[2], np.zeros(3))
    with pytest.raises(GraphInputError):
        co_occurrence([{3}], 2)


def test_threshold_boundary():
    P = np.array([[1.0, 0.39, 0.41, 0.4]])
    assert threshold(P, 0.4).A.tolist() == [[1.0, 0.0, 1.0, 1.0]]
    for bad in (0.0, 1.5):
        with pytest.raises(GraphInputError):
            threshold(P, bad)


def test_tau_one_keeps_diagonal_for_strict_world():
    # no pair always co-occurs, so only self-loops survive
    sets = [{0}, {1}, {2}, {0, 1}, {1, 2}]
    A = threshold(co_occurrence(sets, 3), 1.0).A
    assert np.array_equal(A, np.eye(3))


def test_similarity_softmax_fixture():
    ef = np.array([[1.0, 0.0]])
    ew = np.array([[1.0, 0.0], [0.0, 1.0]])
    B = similarity_edges(ef, ew).B
    assert np.allclose(B, [[0.7311, 0.2689]], atol=1e-4)


def test_similarity_examples():
    same = np.ones((3, 4))
    assert np.allclose(similarity_edges(same, same[:2]).B, 0.5)
    assert np.array_equal(similarity_edges(np.eye(3), np.ones((1, 3))).B, np.ones((3, 1)))
    with pytest.raises(GraphInputError, match="weak category cat1"):
        similarity_edges(np.eye(2), np.array([[1.0, 0.0], [0.0, 0.0]]), ["a", "b"],
                         ["cat0", "cat1"])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_similarity_rows_stochastic(cf, cw, seed):
    rng = np.random.default_rng(seed)
    ef, ew = rng.normal(size=(cf, 6)), rng.normal(size=(cw, 6))
    B = similarity_edges(ef, ew).B
    assert np.all(np.abs(B.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(B > 0)
    sim = (ef / np.linalg.norm(ef, axis=1, keepdims=True)) @ \
        (ew / np.linalg.norm(ew, axis=1, keepdims=True)).T
    assert np.array_equal(np.argmax(B, axis=1), np.argmax(sim + 3.0, axis=1))


def test_handcrafted_edges():
    B = handcrafted_edges([(0, 1, "subclass")], 2, 3).B
    assert B.sum() == 1 and B[0, 1] == 1
    assert handcrafted_edges([], 2, 3).B.sum() == 0
    twice = handcrafted_edges([(1, 2, "similar"), (1, 2, "similar")], 2, 3).B
    assert twice[1, 2] == 1 and set(np.unique(twice)) <= {0.0, 1.0}
    with pytest.raises(GraphInputError):
        handcrafted_edges([(2, 0, "includes")], 2, 3)


def test_combine_edges():
    sim = similarity_edges(np.eye(2), np.eye(2))
    zero = handcrafted_edges([], 2, 2)
    assert np.array_equal(combine_edges(sim, zero).B, sim.B)
    assert combine_edges(sim, zero, "sim_only") is sim
    one = handcrafted_edges([(0, 1, "similar")], 2, 2)
    assert combine_edges(sim, one).B[0].sum() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        combine_edges(sim, handcrafted_edges([], 2, 3))


def test_build_graph_modes_and_round_trip(tmp_path, caplog):
    ef, ew = np.eye(3)[:2], np.eye(3)
    args = ([{0, 1}, {0}], [{0}, {1, 2}], ["a", "b"], ["x", "y", "z"])
    g = build_graph(*args, emb_full=ef, emb_weak=ew, tau=0.4)
    assert g.B.shape == (2, 3) and np.allclose(g.B.sum(axis=1), 1)
    with caplog.at_level(logging.WARNING):
        hc = build_graph(*args, relations=[], edge_mode="handcrafted")
    assert hc.B.sum() == 0 and "relations" in caplog.text
    with pytest.raises(GraphInputError):
        build_graph(*args, edge_mode="similarity")
    both = build_graph(*args, emb_full=ef, emb_weak=ew, relations=[(0, 0, "similar")],
                       edge_mode="sum")
    assert both.B[0].sum() == pytest.approx(2.0)
    path = tmp_path / "g.json"
    both.save(path)
    back = SemanticGraph.load(path)
    for key in ("P_f", "P_w", "A_f", "A_w", "B"):
        assert np.array_equal(getattr(back, key), getattr(both, key))
    assert back.full_names == ["a", "b"] and back.edge_mode == "sum"


def test_text_file_round_trips(tmp_path):
    names = ["cat", "dog"]
    table = np.random.default_rng(0).normal(size=(2, 4))
    write_embedding_file(tmp_path / "e.txt", names, table)
    assert np.array_equal(read_embedding_file(tmp_path / "e.txt", names[::-1]), table[::-1])
    with pytest.raises(GraphInputError, match="no embedding"):
        read_embedding_file(tmp_path / "e.txt", ["cow"])
    rel = [(1, 0, "subclass")]
    write_relation_file(tmp_path / "r.tsv", rel, names, ["puppy"])
    with open(tmp_path / "r.tsv", "a") as fh:
        fh.write("# comment\n\n")
    assert read_relation_file(tmp_path / "r.tsv", names, ["puppy"]) == rel
    (tmp_path / "bad.tsv").write_text("cat\tpuppy\tfriend\n")
    with pytest.raises(GraphInputError, match="bad.tsv:1"):
        read_relation_file(tmp_path / "bad.tsv", names, ["puppy"])
