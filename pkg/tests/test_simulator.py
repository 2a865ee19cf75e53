"""Simulator tests: breakpoint bookkeeping, truth replay, determinism."""

import numpy as np
import pytest

from duphist.config import Config
from duphist.dataio import build_cluster_data, revcomp_codes
from duphist.history import serialize_history, validate_history
from duphist.model import joint_log_score
from duphist.newick import parse_newick
from duphist.simulator import (
    SimulatorError,
    _apply_bp_event,
    _atoms_from_sites,
    _BpEvent,
    codes_to_str,
    draw_dup_geometry,
    draw_event_kind,
    filter_short_atoms,
    segment_tree_to_newick,
    simulate_cluster,
    write_segment_trees,
)
from duphist.species_tree import SpeciesTree, single_species_tree
from duphist.substitution import encode_sequence

DESK_TREE = "((human:0.0067,chimp:0.0068)hominid:0.0245,macaque:0.0351)root;"


def fresh_sites(n):
    return np.arange(n, dtype=np.int64), np.ones(n, dtype=np.int8)


def partition(cuts, n):
    bounds = [0] + sorted(c for c in cuts if 0 < c < n) + [n]
    start_of = {}
    end_of = {}
    type_lengths = {}
    for k in range(len(bounds) - 1):
        tid = k + 1
        start_of[bounds[k]] = tid
        end_of[tid] = bounds[k + 1]
        type_lengths[tid] = bounds[k + 1] - bounds[k]
    return start_of, end_of, type_lengths


def atoms_of(root, strand, cuts, n0):
    start_of, end_of, type_lengths = partition(cuts, n0)
    return _atoms_from_sites(root, strand, cuts, start_of, end_of, type_lengths)


class TestSiteBookkeeping:
    def test_tandem_duplication(self):
        root, strand = fresh_sites(10)
        cuts = set()
        root, strand = _apply_bp_event(root, strand, _BpEvent("d", 2, 5, 5), cuts)
        assert len(root) == 13
        assert atoms_of(root, strand, cuts, 10) == [(1, 1), (2, 1), (2, 1), (3, 1)]

    def test_inverted_duplication(self):
        root, strand = fresh_sites(10)
        cuts = set()
        root, strand = _apply_bp_event(
            root, strand, _BpEvent("d", 2, 5, 7, inverted=True), cuts
        )
        assert atoms_of(root, strand, cuts, 10) == [
            (1, 1),
            (2, 1),
            (3, 1),
            (2, -1),
            (4, 1),
        ]

    def test_deletion(self):
        root, strand = fresh_sites(10)
        cuts = set()
        root, strand = _apply_bp_event(root, strand, _BpEvent("x", 3, 7), cuts)
        assert atoms_of(root, strand, cuts, 10) == [(1, 1), (3, 1)]

    def test_duplication_to_sequence_end(self):
        root, strand = fresh_sites(10)
        cuts = set()
        root, strand = _apply_bp_event(root, strand, _BpEvent("d", 0, 3, 10), cuts)
        assert atoms_of(root, strand, cuts, 10) == [(1, 1), (2, 1), (1, 1)]

    def test_copy_context_is_cut_for_all_instances(self):
        # The source run sits mid-sequence with untouched flanks; the copy's
        # boundaries must still split the source occurrence, or the two
        # instances would disagree about their extent.
        root, strand = fresh_sites(12)
        cuts = set()
        root, strand = _apply_bp_event(root, strand, _BpEvent("d", 4, 8, 12), cuts)
        atoms = atoms_of(root, strand, cuts, 12)
        assert atoms == [(1, 1), (2, 1), (3, 1), (2, 1)]

    def test_missing_cut_is_detected(self):
        root, strand = fresh_sites(10)
        cuts = set()
        root, strand = _apply_bp_event(root, strand, _BpEvent("d", 2, 5, 5), cuts)
        with pytest.raises(SimulatorError, match="partition"):
            atoms_of(root, strand, set(), 10)


@pytest.mark.parametrize("seed", range(25))
def test_random_events_keep_layouts_consistent(seed):
    """Dense tiny simulations; the three-way truth cross-check is internal."""
    cfg = Config(
        lambda_rate=6.0,
        root_branch_length=0.6,
        ancestral_length=60,
        mean_dup_length=9.0,
        mean_dup_distance=12.0,
        mean_del_length=6.0,
        p_deletion=0.15,
        min_atom_bp=0,
    )
    st = SpeciesTree.from_newick("(a:0.5,b:0.5)root;")
    cluster = simulate_cluster(cfg, st, seed)
    assert validate_history(cluster.history, cluster.table, cluster.type_lengths) == []
    for sp, seq in cluster.fastas.items():
        atoms = cluster.replay.extant[sp].atoms
        assert len(seq) == sum(cluster.type_lengths[a.type_id] for a in atoms)
        assert set(seq) <= set("ACGT")


@pytest.fixture(scope="module")
def desk_cluster():
    cfg = Config(lambda_rate=50.0, root_branch_length=0.01)
    st = SpeciesTree.from_newick(DESK_TREE)
    return simulate_cluster(cfg, st, 4)


class TestDeskScale:
    @pytest.fixture()
    def cluster(self, desk_cluster):
        return desk_cluster

    def test_truth_history_validates(self, cluster):
        assert (
            validate_history(cluster.history, cluster.table, cluster.type_lengths)
            == []
        )

    def test_truth_history_scores_finite(self, cluster):
        cfg = Config(lambda_rate=50.0, root_branch_length=0.01)
        data = build_cluster_data(cluster.table, cluster.fastas)
        score = joint_log_score(cluster.history, data, cfg.model_params())
        assert np.isfinite(score)

    def test_same_type_content_is_similar(self, cluster):
        by_type = {}
        for sp in cluster.table.species_list():
            for atom in cluster.table.sequences[sp].atoms:
                c = cluster.table.coords[atom.id]
                codes = encode_sequence(cluster.fastas[sp][c.start : c.end])
                if atom.strand == -1:
                    codes = revcomp_codes(codes)
                by_type.setdefault(atom.type_id, []).append(codes)
        cross = []
        for tid, rows in sorted(by_type.items()):
            if len(rows[0]) >= 150:  # short atoms are too noisy to bound
                for other in rows[1:]:
                    ident = float(np.mean(rows[0] == other))
                    assert ident > 0.8, f"type {tid} copies diverged: {ident}"
            cross.append(rows[0])
        mismatched = [
            float(np.mean(a[: len(b)] == b[: len(a)]))
            for a, b in zip(cross, cross[1:])
            if min(len(a), len(b)) > 200
        ]
        if mismatched:
            assert min(mismatched) < 0.6

    def test_focal_count_sums_path_branches(self, cluster):
        c = cluster.events_by_branch
        expect = c["human"] + c["hominid"] + c["root"]
        assert cluster.focal_event_count("human", visible=False) == expect

    def test_visible_never_exceeds_total(self, cluster):
        for branch, n in cluster.visible_by_branch.items():
            assert 0 <= n <= cluster.events_by_branch[branch]


def test_no_events_single_type():
    cfg = Config(lambda_rate=1e-9, ancestral_length=400, root_branch_length=0.01)
    st = SpeciesTree.from_newick(DESK_TREE)
    cluster = simulate_cluster(cfg, st, 1)
    assert cluster.history.event_count() == 0
    assert cluster.type_lengths == {1: 400}
    for sp in ("human", "chimp", "macaque"):
        assert [(a.type_id, a.strand) for a in cluster.replay.extant[sp].atoms] == [
            (1, 1)
        ]
        assert len(cluster.fastas[sp]) == 400


def test_determinism_and_seed_sensitivity():
    cfg = Config(lambda_rate=50.0, root_branch_length=0.01, ancestral_length=2000)
    st = SpeciesTree.from_newick(DESK_TREE)
    a = simulate_cluster(cfg, st, 11)
    b = simulate_cluster(cfg, st, 11)
    assert a.fastas == b.fastas
    assert serialize_history(a.history) == serialize_history(b.history)
    assert {i: (c.start, c.end) for i, c in a.table.coords.items()} == {
        i: (c.start, c.end) for i, c in b.table.coords.items()
    }
    c = simulate_cluster(cfg, st, 12)
    assert a.fastas != c.fastas or serialize_history(a.history) != serialize_history(
        c.history
    )


def test_deletions_only_shrink():
    cfg = Config(
        lambda_rate=4.0,
        root_branch_length=1.0,
        ancestral_length=300,
        p_deletion=1.0,
        mean_del_length=40.0,
    )
    st = single_species_tree("only")
    cluster = simulate_cluster(cfg, st, 3)
    assert all(e.kind == "x" for e in cluster.bp_events["only"])
    assert len(cluster.fastas["only"]) < 300


def test_filter_short_atoms():
    cfg = Config(lambda_rate=50.0, root_branch_length=0.01)
    st = SpeciesTree.from_newick(DESK_TREE)
    cluster = simulate_cluster(cfg, st, 0)
    short = {t for t, n in cluster.type_lengths.items() if n < 500}
    assert short, "expected some sub-500bp types in this seed"
    kept = filter_short_atoms(cluster.table, 500)
    for sp in kept.species_list():
        for atom in kept.sequences[sp].atoms:
            assert cluster.type_lengths[atom.type_id] >= 500
    total = sum(len(s.atoms) for s in cluster.table.sequences.values())
    kept_total = sum(len(s.atoms) for s in kept.sequences.values())
    dropped = total - kept_total
    assert dropped == sum(
        1
        for sp in cluster.table.species_list()
        for a in cluster.table.sequences[sp].atoms
        if a.type_id in short
    )


def test_raw_draw_statistics_smoke():
    params = Config().model_params()
    rng = np.random.default_rng(0)
    length, distance, inverted, to_right = draw_dup_geometry(rng, params, 20000)
    assert abs(length.mean() / 14307.0 - 1.0) < 0.05
    assert abs(distance.mean() / 306718.0 - 1.0) < 0.05
    assert abs(inverted.mean() - 0.39) < 0.02
    assert abs(to_right.mean() - 0.5) < 0.02
    dels = draw_event_kind(rng, params, 20000)
    assert abs(dels.mean() - 0.05) < 0.01
    one = draw_dup_geometry(rng, params)
    assert isinstance(one[0], int) and one[0] >= 1


def test_segment_tree_newick_roundtrip(tmp_path):
    cfg = Config(lambda_rate=50.0, root_branch_length=0.01, ancestral_length=2000)
    st = SpeciesTree.from_newick(DESK_TREE)
    cluster = simulate_cluster(cfg, st, 4)
    path = tmp_path / "trees.nwk"
    write_segment_trees(path, cluster.replay.segment_trees)
    lines = [
        ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")
    ]
    assert len(lines) == len(cluster.replay.segment_trees)
    for line in lines:
        tid, newick = line.split("\t")
        clade = parse_newick(newick)
        assert int(tid) in cluster.replay.segment_trees
        stack = [clade]
        leaves = []
        while stack:
            node = stack.pop()
            if node.children:
                stack.extend(node.children)
            else:
                leaves.append(node.name)
        assert all("|" in leaf for leaf in leaves)


def test_codes_roundtrip():
    codes = encode_sequence("ACGTACGT")
    assert codes_to_str(codes) == "ACGTACGT"
