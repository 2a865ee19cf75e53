import io

import pytest

from duphist.atoms import (
    FORWARD,
    REVERSE,
    AtomCoords,
    AtomInstance,
    AtomTable,
)
from duphist.events import Deletion, Duplication
from duphist.history import (
    History,
    HistoryError,
    parse_history_lines,
    read_history_file,
    replay_history,
    segment_tree_leaves,
    serialize_history,
    validate_history,
    write_history,
    write_history_file,
)
from duphist.species_tree import SpeciesTree

NEWICK = "((human:0.25,chimp:0.25)hominid:0.25,macaque:0.5)root;"
TYPE_LENGTHS = {1: 100, 2: 50, 3: 200}


def example_history():
    tree = SpeciesTree.from_newick(NEWICK)
    return History(
        species_tree=tree,
        root_branch_length=0.5,
        ancestral=[(1, FORWARD), (2, FORWARD), (3, FORWARD)],
        events={
            "root": [Duplication(1, 2, 3, inverted=True)],
            "human": [Deletion(0, 1)],
        },
    )


def test_replay_extant_sequences():
    result = replay_history(example_history(), TYPE_LENGTHS)
    assert result.extant["human"].type_strand() == (
        (2, FORWARD),
        (3, FORWARD),
        (2, REVERSE),
    )
    assert result.extant["chimp"].type_strand() == (
        (1, FORWARD),
        (2, FORWARD),
        (3, FORWARD),
        (2, REVERSE),
    )
    assert result.extant["macaque"].type_strand() == (
        (1, FORWARD),
        (2, FORWARD),
        (3, FORWARD),
        (2, REVERSE),
    )


def test_replay_bp_geometry():
    result = replay_history(example_history(), TYPE_LENGTHS)
    dup = next(se for se in result.scored if se.branch == "root")
    assert dup.len_before_bp == 350
    assert dup.event.length_bp == 50
    assert dup.event.distance_bp == 201
    assert dup.event.centroid_bp == 225.0
    dele = next(se for se in result.scored if se.branch == "human")
    assert dele.len_before_bp == 400
    assert dele.event.length_bp == 100
    assert dele.event.centroid_bp == 50.0


def test_replay_segment_trees():
    result = replay_history(example_history(), TYPE_LENGTHS)
    # the deleted human copy suppresses the hominid node for type 1
    assert result.segment_trees[1] == (
        "N",
        ((("L", ("chimp", 0)), 0.5), (("L", ("macaque", 0)), 0.5)),
    )
    hominid3 = (
        "N",
        ((("L", ("chimp", 2)), 0.25), (("L", ("human", 1)), 0.25)),
    )
    assert result.segment_trees[3] == (
        "N",
        ((hominid3, 0.25), (("L", ("macaque", 2)), 0.5)),
    )
    # type 2 roots at the duplication event, halfway down the root branch
    source_inner = (
        "N",
        ((("L", ("chimp", 1)), 0.25), (("L", ("human", 0)), 0.25)),
    )
    source_clade = ("N", ((source_inner, 0.25), (("L", ("macaque", 1)), 0.5)))
    copy_inner = (
        "N",
        ((("L", ("chimp", 3)), 0.25), (("L", ("human", 2)), 0.25)),
    )
    copy_clade = ("N", ((copy_inner, 0.25), (("L", ("macaque", 3)), 0.5)))
    assert result.segment_trees[2] == (
        "N",
        ((source_clade, 0.25), (copy_clade, 0.25)),
    )
    assert sorted(segment_tree_leaves(result.segment_trees[2])) == [
        ("chimp", 1),
        ("chimp", 3),
        ("human", 0),
        ("human", 2),
        ("macaque", 1),
        ("macaque", 3),
    ]


def extant_table():
    table = AtomTable()
    rows = [
        (1, 2, "human", 0, 50, FORWARD),
        (2, 3, "human", 50, 250, FORWARD),
        (3, 2, "human", 250, 300, REVERSE),
        (4, 1, "chimp", 0, 100, FORWARD),
        (5, 2, "chimp", 100, 150, FORWARD),
        (6, 3, "chimp", 150, 350, FORWARD),
        (7, 2, "chimp", 350, 400, REVERSE),
        (8, 1, "macaque", 0, 100, FORWARD),
        (9, 2, "macaque", 100, 150, FORWARD),
        (10, 3, "macaque", 150, 350, FORWARD),
        (11, 2, "macaque", 350, 400, REVERSE),
    ]
    for aid, tid, species, start, end, strand in rows:
        table.add(
            AtomInstance(aid, tid, strand),
            AtomCoords(species, species + "_seq", start, end),
        )
    return table


def test_validate_history_accepts_consistent_data():
    assert validate_history(example_history(), extant_table()) == []


def test_validate_history_flags_mismatch():
    table = extant_table()
    table.sequences["human"].atoms[-1] = AtomInstance(3, 2, FORWARD)
    problems = validate_history(example_history(), table)
    assert len(problems) == 1
    assert "human" in problems[0]


def test_replay_rejects_duplicate_ancestral_type():
    h = example_history()
    h.ancestral.append((1, FORWARD))
    with pytest.raises(HistoryError, match="twice"):
        replay_history(h, TYPE_LENGTHS)


def test_replay_rejects_unknown_branch():
    h = example_history()
    h.events["gibbon"] = [Deletion(0, 1)]
    with pytest.raises(HistoryError, match="unknown branch"):
        replay_history(h, TYPE_LENGTHS)


def test_replay_rejects_out_of_bounds_event():
    h = example_history()
    h.events["chimp"] = [Deletion(2, 9)]
    with pytest.raises(HistoryError, match="chimp"):
        replay_history(h, TYPE_LENGTHS)


def test_serialize_history_distinguishes_events():
    a = example_history()
    b = example_history()
    assert serialize_history(a) == serialize_history(b)
    b.events["human"] = [Deletion(1, 2)]
    assert serialize_history(a) != serialize_history(b)


def test_history_file_round_trip(tmp_path):
    h = example_history()
    path = tmp_path / "history.tsv"
    write_history_file(str(path), h, meta={"seed": 7})
    again = read_history_file(str(path))
    assert serialize_history(again) == serialize_history(h)
    assert again.root_branch_length == h.root_branch_length
    assert again.species_tree.to_newick() == h.species_tree.to_newick()
    text = path.read_text()
    assert text.startswith("# duphist history v1\n")
    assert "# seed: 7" in text


def test_history_text_round_trip_via_stream():
    h = example_history()
    buf = io.StringIO()
    write_history(buf, h)
    again = parse_history_lines(buf.getvalue().splitlines())
    assert serialize_history(again) == serialize_history(h)


def test_parse_requires_tree_line():
    with pytest.raises(HistoryError, match="species_tree"):
        parse_history_lines(["anc\t1\t+"])
