import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graph_suite import SUITE, brute_force_best, shrink_records, two_triangles
from migsys.io import FlowRecord
from migsys.walktrap import (
    WeightedGraph,
    best_partition,
    compare_pre_post,
    modularity,
    symmetrize,
    walk_distances,
    walktrap,
)
from oracles import walk_distance_loops


def test_symmetrize_examples():
    g = symmetrize([[0, 2], [0, 0]])
    np.testing.assert_array_equal(g.weights, [[0, 2], [2, 0]])
    g = symmetrize([[5, 1], [3, 7]])
    np.testing.assert_array_equal(g.weights, [[0, 4], [4, 0]])
    with pytest.raises(ValueError):
        symmetrize(np.ones((2, 3)))
    with pytest.raises(ValueError):
        symmetrize([[0, -1], [0, 0]])


def test_graph_validation():
    with pytest.raises(ValueError):
        WeightedGraph(np.array([[0, 1], [2, 0]]))
    with pytest.raises(ValueError):
        WeightedGraph(np.eye(2))
    with pytest.raises(ValueError):
        WeightedGraph(np.zeros((2, 2)), ids=["a"])


def test_modularity_closed_forms():
    g = two_triangles()
    assert modularity(g, [0, 0, 0, 1, 1, 1]) == pytest.approx(0.5)
    assert modularity(g, [0] * 6) == pytest.approx(0.0)
    k5 = SUITE["complete5"]()
    assert modularity(k5, [0] * 5) == pytest.approx(0.0)
    assert modularity(WeightedGraph(np.zeros((3, 3))), [0, 1, 2]) == 0.0


@given(st.integers(2, 7), st.integers(0, 2**31), st.integers(1, 5), st.booleans())
def test_walk_distances_match_oracle(n, seed, t, loops):
    rng = np.random.default_rng(seed)
    W = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    W = np.triu(W, 1)
    W = W + W.T
    r = walk_distances(WeightedGraph(W), t, loops)
    np.testing.assert_allclose(r, walk_distance_loops(W, t, loops), atol=1e-12)
    assert np.all(np.diag(r) == 0) and np.all(r >= 0)
    np.testing.assert_allclose(r, r.T, atol=1e-15)


def test_walk_length_validated():
    with pytest.raises(ValueError):
        walktrap(two_triangles(), t=0)


@pytest.mark.parametrize("name", sorted(SUITE))
def test_suite_matches_brute_force(name):
    g = SUITE[name]()
    best_q, _ = brute_force_best(g)
    p = best_partition(walktrap(g))
    assert p.modularity == pytest.approx(best_q, abs=1e-12)
    labels = [p.labels[i] for i in g.ids]
    assert modularity(g, labels) == pytest.approx(p.modularity, abs=1e-15)


def test_two_triangles_partition():
    p = best_partition(walktrap(two_triangles()))
    assert p.sizes() == {1: 3, 2: 3} and p.modularity == pytest.approx(0.5)


def test_dendrogram_shape():
    g = SUITE["ring_of_cliques"]()
    d = walktrap(g)
    assert len(d.merges) == g.n - 1 and len(d.levels) == g.n == len(d.modularity)
    assert [d.n_communities(l) for l in range(g.n)] == list(range(g.n, 0, -1))
    # A merge only joins communities that already exist; new ids are n + index.
    for idx, (u, v, dv) in enumerate(d.merges):
        assert 0 <= u < g.n + idx and 0 <= v < g.n + idx and dv >= 0


@settings(max_examples=20)
@given(st.floats(1e-3, 1e3))
def test_partition_scale_invariant(s):
    g = SUITE["uneven_blocks"]()
    base = best_partition(walktrap(g)).labels
    assert best_partition(walktrap(WeightedGraph(g.weights * s))).labels == base


def test_isolates_stay_alone_and_zero_graph():
    g = SUITE["triangles_with_isolate"]()
    p = best_partition(walktrap(g))
    iso = p.labels["6"]
    assert p.members(iso) == ["6"]
    z = best_partition(walktrap(WeightedGraph(np.zeros((4, 4)))))
    assert len(set(z.labels.values())) == 4 and z.modularity == 0.0


# -- pre/post comparison ---------------------------------------------------------------

def block_records(periods):
    recs = []
    for k in periods:
        for blk in (["a", "b", "c"], ["d", "e", "f"]):
            for o in blk:
                for d in blk:
                    if o != d:
                        recs.append(FlowRecord(o, d, k, 10))
        recs.append(FlowRecord("c", "d", k, 1))
    return recs


def test_identical_sides_give_identical_partitions():
    cmp = compare_pre_post(block_records(["1", "2", "3"]), "2", focal="a")
    pre, post, table = cmp
    assert pre.labels == post.labels
    assert all(a == b for _, a, b in table)
    assert cmp.focal["size_ratio"] == 1.0 and cmp.focal["pre_size"] == 3


def test_shrink_scenario():
    cmp = compare_pre_post(shrink_records(0), "5", focal="n00")
    assert cmp.focal["pre_size"] == 8 and cmp.focal["post_size"] == 4
    assert cmp.post.sizes() == {1: 4, 2: 4, 3: 4}


def test_split_errors():
    recs = block_records(["1", "2", "3"])
    for split in ("1", "3"):
        with pytest.raises(ValueError, match="no periods"):
            compare_pre_post(recs, split)
    with pytest.raises(ValueError):
        compare_pre_post(recs, "9")
    with pytest.raises(ValueError, match="focal"):
        compare_pre_post(recs, "2", focal="zz")
