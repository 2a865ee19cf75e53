"""DOT export checks: cluster layout, lineage fan-out, color stability."""
import re

from duphist.config import Config
from duphist.events import Deletion, Duplication
from duphist.history import History
from duphist.simulator import simulate_cluster
from duphist.species_tree import SpeciesTree, single_species_tree
from duphist.tubetree import _type_color, tube_tree_dot, write_tubetree


def test_empty_history_single_species_is_one_cluster():
    tree = single_species_tree("human")
    h = History(tree, 0.5, [(1, 1), (2, 1), (3, -1)])
    dot = tube_tree_dot(h)
    assert dot.startswith("digraph")
    assert dot.count("subgraph cluster_") == 1
    # ancestral order, with strands rendered
    labels = re.findall(r'label="(\d+[+-])"', dot)
    assert labels == ["1+", "2+", "3-"]
    # no lineage edges anywhere (only invisible intra-cluster chains)
    visible = [
        ln for ln in dot.splitlines() if "->" in ln and "invis" not in ln
    ]
    assert visible == []


def test_single_duplication_fans_out_from_source_atom():
    tree = SpeciesTree.from_newick("(human:1.0)root;")
    h = History(tree, 0.5, [(1, 1), (2, 1)])
    h.events["human"] = [Duplication(0, 1, 2, False)]
    dot = tube_tree_dot(h)
    assert dot.count("subgraph cluster_") == 2
    lineage = [
        ln.strip().rstrip(";")
        for ln in dot.splitlines()
        if "->" in ln and "invis" not in ln
    ]
    # the copied root atom feeds two human atoms; the other exactly one
    assert sorted(lineage) == [
        "root_0 -> human_0",
        "root_0 -> human_2",
        "root_1 -> human_1",
    ]


def test_deletion_leaves_unmatched_parent_atom():
    tree = SpeciesTree.from_newick("(human:1.0)root;")
    h = History(tree, 0.5, [(1, 1), (2, 1), (3, 1)])
    h.events["human"] = [Deletion(1, 2)]
    dot = tube_tree_dot(h)
    lineage = [
        ln.strip().rstrip(";")
        for ln in dot.splitlines()
        if "->" in ln and "invis" not in ln
    ]
    assert sorted(lineage) == ["root_0 -> human_0", "root_2 -> human_1"]


def test_root_cluster_shows_post_stem_sequence():
    tree = single_species_tree("human")
    h = History(tree, 0.5, [(1, 1), (2, 1)])
    h.events["human"] = [Duplication(0, 2, 2, True)]
    dot = tube_tree_dot(h)
    labels = re.findall(r'label="(\d+[+-])"', dot)
    # inverted copy appended: reversed order, flipped strands
    assert labels == ["1+", "2+", "2-", "1-"]


def test_simulated_cluster_renders_every_node(tmp_path):
    cfg = Config(
        lambda_rate=30.0, root_branch_length=0.05, ancestral_length=2000
    )
    tree = SpeciesTree.from_newick(
        "((human:0.0067,chimp:0.0068)hominid:0.0245,macaque:0.0351)root;"
    )
    cluster = simulate_cluster(cfg, tree, seed=5)
    dot = tube_tree_dot(cluster.history)
    assert dot.count("subgraph cluster_") == len(tree.nodes)
    for name in tree.nodes:
        assert f'label="{name}";' in dot
    assert dot.rstrip().endswith("}")
    assert dot.count("{") == dot.count("}")
    # leaf cluster order matches the extant sequences
    for leaf in tree.leaves():
        want = [
            f"{a.type_id}{'+' if a.strand > 0 else '-'}"
            for a in cluster.replay.extant[leaf.name].atoms
        ]
        block = dot.split(f'label="{leaf.name}";')[1].split("}")[0]
        got = re.findall(r'label="(\d+[+-])"', block)
        assert got == want
    out = tmp_path / "tube.dot"
    write_tubetree(str(out), cluster.history)
    assert out.read_text() == dot


def test_colors_are_stable_per_type():
    assert _type_color(7) == _type_color(7)
    assert _type_color(7) != _type_color(8)
    tree = single_species_tree("s")
    h = History(tree, 0.5, [(4, 1), (9, -1), (4, -1)])
    dot = tube_tree_dot(h)
    fills = re.findall(r'fillcolor="([^"]+)"', dot)
    assert fills[0] == fills[2] == _type_color(4)
    assert fills[1] == _type_color(9)
