"""Independent reference implementations used by several test modules.

Everything here favors obviousness over speed: exhaustive recursion,
re-deriving state from scratch at every step, no caching.
"""
import numpy as np

from duphist.atoms import AtomCoords, AtomInstance, AtomTable
from duphist.guidetrees import GuideTreePool, star_tree
from duphist.history import serialize_history
from duphist.model import ClusterData, joint_log_score
from duphist.proposal import (
    _assemble_history,
    all_candidates,
    apply_candidate,
    build_state,
)


def make_table(species_atoms, type_lengths):
    """Build an AtomTable from {species: [(type_id, strand), ...]}."""
    table = AtomTable()
    nid = 0
    for sp, specs in species_atoms.items():
        pos = 0
        for tid, s in specs:
            bp = type_lengths[tid]
            table.add(
                AtomInstance(nid, tid, s),
                AtomCoords(sp, sp + ".1", pos, pos + bp),
            )
            nid += 1
            pos += bp
    return table


def star_trees(table):
    trees = {}
    for tid in table.type_lengths:
        leaves = [
            (sp, i)
            for sp, seq in table.sequences.items()
            for i, a in enumerate(seq.atoms)
            if a.type_id == tid
        ]
        trees[tid] = star_tree(leaves)
    return trees


def star_pool(table):
    return GuideTreePool(
        trees={tid: [t] for tid, t in star_trees(table).items()}
    )


def synthetic_cluster_data(table, columns=6):
    """ClusterData with flat per-type alignments (all-identical sites)."""
    alignments = {}
    for sp, seq in table.sequences.items():
        for i, atom in enumerate(seq.atoms):
            col = alignments.setdefault(atom.type_id, {})
            col[(sp, i)] = np.zeros(columns, dtype=np.uint8)
    return ClusterData(table=table, type_alignments=alignments)


def enumerate_histories(table, species_tree, trees, root_branch_length):
    """Every distinct history any walk can reach, by exhaustive DFS.

    Each recursion step replays its descriptor prefix from a fresh state,
    so no walk state is ever shared or copied.
    """
    found = {}

    def state_after(prefix):
        state = build_state(table, species_tree, trees)
        for ident in prefix:
            cand = next(
                c for c in all_candidates(state) if c.ident == ident
            )
            apply_candidate(state, cand)
        return state

    def rec(prefix):
        state = state_after(prefix)
        if state.finished():
            h = _assemble_history(state, root_branch_length)
            found.setdefault(serialize_history(h), h)
            return
        for cand in all_candidates(state):
            rec(prefix + (cand.ident,))

    rec(())
    return list(found.values())


def exact_posterior(histories, data, params):
    """Normalized target over an enumerated history set."""
    scores = np.array(
        [joint_log_score(h, data, params) for h in histories], dtype=float
    )
    peak = scores.max()
    weights = np.exp(scores - peak)
    probs = weights / weights.sum()
    return {
        serialize_history(h): p for h, p in zip(histories, probs)
    }
