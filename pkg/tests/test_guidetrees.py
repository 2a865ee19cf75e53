import numpy as np
import pytest

from duphist.guidetrees import (
    GuideTreeError,
    GuideTreePool,
    UnrootedTree,
    collapse_short_branches,
    random_binary_tree,
    read_pools,
    sample_guide_pool,
    star_tree,
    write_pools,
)
from duphist.substitution import HkyParams, encode_sequence

HKY = HkyParams(4.0, (0.25, 0.25, 0.25, 0.25))


def quartet():
    """Binary tree ((a0,a1),(b0,b1)) with distinct pendant lengths."""
    t = UnrootedTree()
    u = t._new_node()
    v = t._new_node()
    t.connect(t.add_leaf_node(("a", 0)), u, 0.1)
    t.connect(t.add_leaf_node(("a", 1)), u, 0.2)
    t.connect(t.add_leaf_node(("b", 0)), v, 0.3)
    t.connect(t.add_leaf_node(("b", 1)), v, 0.4)
    t.connect(u, v, 0.05)
    return t


def test_cherries_on_binary_tree():
    t = quartet()
    assert t.cherries() == [
        (("a", 0), ("a", 1)),
        (("b", 0), ("b", 1)),
    ]
    assert t.is_cherry(("a", 0), ("a", 1))
    assert not t.is_cherry(("a", 0), ("b", 0))


def test_star_tree_all_pairs_are_cherries():
    s = star_tree([("x", 0), ("x", 1), ("x", 2)], 0.1)
    assert len(s.cherries()) == 3
    assert s.is_cherry(("x", 0), ("x", 2))


def test_two_leaf_tree_is_a_cherry():
    s = star_tree([("x", 0), ("y", 0)], 0.05)
    assert s.cherries() == [(("x", 0), ("y", 0))]
    assert s.is_cherry(("x", 0), ("y", 0))


def test_leaf_distance():
    t = quartet()
    assert t.leaf_distance(("a", 0), ("a", 1)) == pytest.approx(0.3)
    assert t.leaf_distance(("a", 0), ("b", 1)) == pytest.approx(0.55)


def test_remove_leaf_suppresses_degree_two():
    t = quartet()
    t.remove_leaf(("a", 0))
    # u had degree 3; a1 now hangs off the suppressed path into v
    assert t.leaves() == [("a", 1), ("b", 0), ("b", 1)]
    assert all(len(t.adj[n]) == 3 for n in t.adj if n not in t.leaf_label)
    assert t.leaf_distance(("a", 1), ("b", 0)) == pytest.approx(0.55)
    t.remove_leaf(("a", 1))
    t.remove_leaf(("b", 0))
    assert t.leaves() == [("b", 1)]
    assert t.cherries() == []


def test_nni_is_reversible_and_changes_topology():
    t = quartet()
    before = t.topology_key()
    (u, v) = t.internal_edges()[0]
    a = [n for n in sorted(t.adj[u]) if n != v][0]
    b = [n for n in sorted(t.adj[v]) if n != u][0]
    t.nni(a, u, v, b)
    assert t.topology_key() != before
    t.nni(a, v, u, b)
    assert t.topology_key() == before


def test_collapse_short_internal_edge():
    t = quartet()
    # 0.05 * 50 bp = 2.5 expected substitutions, below the cutoff of 5
    collapsed = collapse_short_branches(t, atom_bp=50, threshold_subs=5.0)
    assert collapsed.internal_edges() == []
    assert len(collapsed.cherries()) == 6
    # at 200 bp the same edge carries 10 expected substitutions and stays
    kept = collapse_short_branches(t, atom_bp=200, threshold_subs=5.0)
    assert len(kept.internal_edges()) == 1


def test_collapse_boundary_is_strict():
    t = quartet()
    t.set_length(*t.internal_edges()[0], 0.05)
    exact = collapse_short_branches(t, atom_bp=100, threshold_subs=5.0)
    assert len(exact.internal_edges()) == 1


def test_random_binary_tree_shape():
    rng = np.random.default_rng(3)
    t = random_binary_tree([("s", i) for i in range(6)], rng, 0.1)
    assert t.n_leaves() == 6
    assert len(t.edges()) == 2 * 6 - 3
    assert all(
        len(t.adj[n]) == 3 for n in t.adj if n not in t.leaf_label
    )
    assert all(t.adj[a][b] > 0 for a, b in t.edges())


def test_pool_sampler_recovers_clear_split():
    rng = np.random.default_rng(17)
    alignment = {
        ("a", 0): encode_sequence("ACGT" * 40),
        ("a", 1): encode_sequence("ACGT" * 40),
        ("b", 0): encode_sequence("GTCA" * 40),
        ("b", 1): encode_sequence("GTCA" * 40),
    }
    pool = sample_guide_pool(
        alignment, HKY, rng, iterations=800, burn_in=300, thin=10, atom_bp=160
    )
    assert len(pool) == 50
    good = sum(
        1
        for t in pool
        if t.is_cherry(("a", 0), ("a", 1)) and t.is_cherry(("b", 0), ("b", 1))
    )
    assert good / len(pool) > 0.9


def test_pool_sampler_single_leaf():
    pool = sample_guide_pool(
        {("a", 0): encode_sequence("ACGT")}, HKY, np.random.default_rng(0)
    )
    assert len(pool) == 1
    assert pool[0].leaves() == [("a", 0)]


def test_pool_io_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    t1 = random_binary_tree([("a", 0), ("a", 1), ("b", 0), ("b", 1)], rng, 0.1)
    pool = GuideTreePool(trees={3: [t1, quartet()], 8: [star_tree([("c", 0)])]})
    path = tmp_path / "pools.txt"
    write_pools(str(path), pool)
    again = read_pools(str(path))
    assert sorted(again.trees) == [3, 8]
    assert len(again.trees[3]) == 2
    assert again.trees[3][0].topology_key() == t1.topology_key()
    assert again.trees[3][0].leaves() == t1.leaves()
    a, b = again.trees[3][1].internal_edges()[0]
    assert again.trees[3][1].adj[a][b] == pytest.approx(0.05)
    assert again.trees[8][0].leaves() == [("c", 0)]


def test_duplicate_leaf_label_rejected():
    t = UnrootedTree()
    t.add_leaf_node(("a", 0))
    with pytest.raises(GuideTreeError):
        t.add_leaf_node(("a", 0))
