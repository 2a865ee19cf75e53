"""Forward simulator for duplicated gene clusters with exact ground truth.

Simulation runs at single-site resolution: every site remembers which
ancestral position it descends from and on which strand, so the smallest
set of breakpoints induced by the sampled events can be computed exactly.
Atom types fall out as the intervals of the ancestral axis between
breakpoints, and the logged base-pair events are then replayed at atom
resolution to produce a truth history object that the scoring machinery
accepts unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .atoms import FORWARD, REVERSE, AtomCoords, AtomTable
from .config import Config
from .dataio import revcomp_codes
from .events import Deletion, Duplication
from .history import History, ReplayResult, replay_history
from .model import ModelParams
from .newick import Clade, write_newick
from .species_tree import SpeciesTree
from .substitution import hky_transition

log = logging.getLogger(__name__)

_PLACEMENT_TRIES = 100_000
_BASE_BYTES = np.frombuffer(b"ACGT", dtype=np.uint8)


class SimulatorError(RuntimeError):
    """Internal inconsistency while generating a cluster."""


# ---------------------------------------------------------------------------
# Raw event draws.  These are the unconditional distributions; placement
# rejection happens separately so the raw statistics stay untouched.
# ---------------------------------------------------------------------------


def draw_event_kind(rng: np.random.Generator, params: ModelParams, size=None):
    """True where the event is a deletion (probability p_deletion)."""
    if size is None:
        return bool(rng.random() < params.p_deletion)
    return rng.random(size) < params.p_deletion


def draw_dup_geometry(rng: np.random.Generator, params: ModelParams, size=None):
    """Raw duplication geometry: (length, distance, inverted, to_right).

    Lengths and distances are geometric with the configured means (support
    k >= 1); inversion and placement direction are Bernoulli draws.  The
    draw order is fixed so seeded runs are reproducible.
    """
    length = rng.geometric(1.0 / params.mean_dup_length, size)
    distance = rng.geometric(1.0 / params.mean_dup_distance, size)
    inverted = rng.random(size) < params.p_inversion
    to_right = rng.random(size) < 0.5
    if size is None:
        return int(length), int(distance), bool(inverted), bool(to_right)
    return length, distance, inverted, to_right


def draw_del_length(rng: np.random.Generator, params: ModelParams, size=None):
    length = rng.geometric(1.0 / params.mean_del_length, size)
    return int(length) if size is None else length


def draw_branch_counts(
    rng: np.random.Generator, params: ModelParams, branch_lengths
):
    """Poisson event counts for an array of branch lengths."""
    return rng.poisson(params.lambda_rate * np.asarray(branch_lengths, dtype=float))


# ---------------------------------------------------------------------------
# Site-level pass: apply events to (ancestral position, strand) arrays and
# record every breakpoint as a cut on the ancestral coordinate axis.
# ---------------------------------------------------------------------------


def _mark_edges(root: np.ndarray, strand: np.ndarray, k: int, cuts: set) -> None:
    """Record the ancestral edges flanking layout position k.

    Position k is a boundary between site k-1 and site k of the current
    layout; each side contributes the edge of its own ancestral site.  At
    the two sequence ends only one side exists.
    """
    n = len(root)
    if k > 0:
        r = int(root[k - 1])
        cuts.add(r + 1 if strand[k - 1] > 0 else r)
    if k < n:
        r = int(root[k])
        cuts.add(r if strand[k] > 0 else r + 1)


@dataclass
class _BpEvent:
    kind: str  # "d" or "x"
    start: int
    end: int
    insert: int = -1
    inverted: bool = False


def _place_duplication(rng, params, n: int) -> _BpEvent:
    for _ in range(_PLACEMENT_TRIES):
        length, distance, inverted, to_right = draw_dup_geometry(rng, params)
        gap = distance - 1
        span = length + gap
        centroid = int(rng.integers(n))
        h0 = centroid - span // 2
        if h0 < 0 or h0 + span > n:
            continue
        if to_right:
            return _BpEvent("d", h0, h0 + length, h0 + span, inverted)
        return _BpEvent("d", h0 + gap, h0 + span, h0, inverted)
    raise SimulatorError(f"no valid duplication placement found on {n}bp")


def _place_deletion(rng, params, n: int) -> _BpEvent:
    for _ in range(_PLACEMENT_TRIES):
        length = draw_del_length(rng, params)
        centroid = int(rng.integers(n))
        s0 = centroid - length // 2
        if s0 < 0 or s0 + length > n:
            continue
        return _BpEvent("x", s0, s0 + length)
    raise SimulatorError(f"no valid deletion placement found on {n}bp")


def _apply_bp_event(root, strand, ev: _BpEvent, cuts):
    if ev.kind == "d":
        _mark_edges(root, strand, ev.start, cuts)
        _mark_edges(root, strand, ev.end, cuts)
        _mark_edges(root, strand, ev.insert, cuts)
        cp_root = root[ev.start : ev.end]
        cp_strand = strand[ev.start : ev.end]
        if ev.inverted:
            cp_root = cp_root[::-1]
            cp_strand = -cp_strand[::-1]
        q = ev.insert
        root = np.concatenate([root[:q], cp_root, root[q:]])
        strand = np.concatenate([strand[:q], cp_strand, strand[q:]])
        _mark_edges(root, strand, q, cuts)
        _mark_edges(root, strand, q + (ev.end - ev.start), cuts)
    else:
        _mark_edges(root, strand, ev.start, cuts)
        _mark_edges(root, strand, ev.end, cuts)
        root = np.concatenate([root[: ev.start], root[ev.end :]])
        strand = np.concatenate([strand[: ev.start], strand[ev.end :]])
        _mark_edges(root, strand, ev.start, cuts)
    return root, strand


def _atoms_from_sites(root, strand, cuts, start_of, end_of, type_lengths):
    """Decompose a site layout into (type_id, strand) atoms.

    Atoms end where neighbouring sites are not ancestrally consecutive on
    the same strand, or where the shared ancestral edge carries a cut.
    Every atom must land exactly on one ancestral interval.
    """
    out = []
    n = len(root)
    i = 0
    while i < n:
        s = int(strand[i])
        j = i + 1
        while j < n:
            if strand[j] != s or int(root[j]) != int(root[j - 1]) + s:
                break
            edge = int(root[j]) if s > 0 else int(root[j - 1])
            if edge in cuts:
                break
            j += 1
        if s > 0:
            a, b = int(root[i]), int(root[j - 1]) + 1
        else:
            a, b = int(root[j - 1]), int(root[i]) + 1
        tid = start_of.get(a)
        if tid is None or end_of[tid] != b or type_lengths[tid] != j - i:
            raise SimulatorError(
                f"atom [{a},{b}) does not match the ancestral partition"
            )
        out.append((tid, FORWARD if s > 0 else REVERSE))
        i = j
    return out


# ---------------------------------------------------------------------------
# Atom-level conversion: replay the logged bp events against atom lists to
# build the truth History.
# ---------------------------------------------------------------------------


def _bp_to_atom_index(prefix: dict[int, int], bp: int, what: str) -> int:
    idx = prefix.get(bp)
    if idx is None:
        raise SimulatorError(f"{what} at {bp}bp is not on an atom boundary")
    return idx


def _convert_branch_events(
    seq: list[tuple[int, int]],
    bp_events: list[_BpEvent],
    type_lengths: dict[int, int],
):
    """Map bp-resolution events onto the atom layout of one branch.

    Returns the atom-level events, the final atom layout and the set of
    type ids each event's source footprint touches.
    """
    events = []
    touched: list[set[int]] = []
    for ev in bp_events:
        prefix = {}
        total = 0
        for k, (tid, _) in enumerate(seq):
            prefix[total] = k
            total += type_lengths[tid]
        prefix[total] = len(seq)
        if ev.kind == "d":
            i0 = _bp_to_atom_index(prefix, ev.start, "duplication source start")
            i1 = _bp_to_atom_index(prefix, ev.end, "duplication source end")
            j = _bp_to_atom_index(prefix, ev.insert, "duplication insertion")
            events.append(Duplication(i0, i1, j, ev.inverted))
            touched.append({tid for tid, _ in seq[i0:i1]})
            copy = seq[i0:i1]
            if ev.inverted:
                copy = [(tid, -s) for tid, s in reversed(copy)]
            seq = seq[:j] + copy + seq[j:]
        else:
            i0 = _bp_to_atom_index(prefix, ev.start, "deletion start")
            i1 = _bp_to_atom_index(prefix, ev.end, "deletion end")
            events.append(Deletion(i0, i1))
            touched.append({tid for tid, _ in seq[i0:i1]})
            seq = seq[:i0] + seq[i1:]
    return events, seq, touched


# ---------------------------------------------------------------------------
# Nucleotide synthesis along the truth segment trees.
# ---------------------------------------------------------------------------


def _evolve_codes(rng, codes: np.ndarray, t: float, hky) -> np.ndarray:
    if t <= 0:
        return codes.copy()
    P = hky_transition(t, hky)
    cum = P.cumsum(axis=1)
    u = rng.random(len(codes))
    return (cum[codes] < u[:, None]).sum(axis=1).astype(np.uint8)


def _first_leaf_depth(tree) -> tuple[tuple[str, int], float]:
    if tree[0] == "L":
        return tree[1], 0.0
    child, t = tree[1][0]
    label, depth = _first_leaf_depth(child)
    return label, depth + t


def _synthesize_type(
    rng, tree, base: np.ndarray, stem: float, hky
) -> dict[tuple[str, int], np.ndarray]:
    """Evolve a type's ancestral content down its segment tree."""
    store: dict[tuple[str, int], np.ndarray] = {}

    def walk(node, codes):
        if node[0] == "L":
            store[node[1]] = codes
            return
        for child, t in node[1]:
            walk(child, _evolve_codes(rng, codes, t, hky))

    walk(tree, _evolve_codes(rng, base, stem, hky))
    return store


def codes_to_str(codes: np.ndarray) -> str:
    return _BASE_BYTES[codes].tobytes().decode("ascii")


# ---------------------------------------------------------------------------
# Cluster assembly.
# ---------------------------------------------------------------------------


@dataclass
class SimulatedCluster:
    species_tree: SpeciesTree
    seed: int
    ancestral_length: int
    type_lengths: dict[int, int]
    intervals: dict[int, tuple[int, int]]
    history: History
    replay: ReplayResult
    table: AtomTable
    fastas: dict[str, str]
    events_by_branch: dict[str, int]
    visible_by_branch: dict[str, int]
    bp_events: dict[str, list] = field(default_factory=dict)

    def focal_event_count(self, focal: str, visible: bool = True) -> int:
        """Events on the branches from the root stem down to a leaf."""
        node = self.species_tree.nodes[focal]
        counts = self.visible_by_branch if visible else self.events_by_branch
        total = 0
        while node is not None:
            total += counts.get(node.name, 0)
            node = node.parent
        return total


def simulate_cluster(
    config: Config, species_tree: SpeciesTree, seed: int
) -> SimulatedCluster:
    """Simulate one cluster and derive its exact truth annotation.

    The generator is consumed in a fixed order (per-branch counts and
    events in preorder, then the root nucleotide sequence, then per-type
    substitutions in type order) so equal seeds give equal outputs.
    """
    params = config.model_params()
    hky = config.hky()
    rng = np.random.default_rng(seed)
    n0 = config.ancestral_length
    if n0 <= 0:
        raise SimulatorError("ancestral_length must be positive")

    cuts: set[int] = set()
    bp_events: dict[str, list[_BpEvent]] = {}
    site_states: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    root_state = (
        np.arange(n0, dtype=np.int64),
        np.ones(n0, dtype=np.int8),
    )
    nodes = species_tree.preorder()
    for node in nodes:
        parent_state = (
            root_state if node.parent is None else site_states[node.parent.name]
        )
        root, strand = parent_state
        length = species_tree.branch_length(node.name, params.root_branch_length)
        count = int(rng.poisson(params.lambda_rate * length))
        evs: list[_BpEvent] = []
        for _ in range(count):
            if len(root) == 0:
                break
            if draw_event_kind(rng, params):
                ev = _place_deletion(rng, params, len(root))
            else:
                ev = _place_duplication(rng, params, len(root))
            root, strand = _apply_bp_event(root, strand, ev, cuts)
            evs.append(ev)
        bp_events[node.name] = evs
        site_states[node.name] = (root, strand)

    # Ancestral partition: intervals of [0, n0) between cuts become types.
    bounds = [0] + sorted(c for c in cuts if 0 < c < n0) + [n0]
    intervals: dict[int, tuple[int, int]] = {}
    start_of: dict[int, int] = {}
    end_of: dict[int, int] = {}
    type_lengths: dict[int, int] = {}
    for k in range(len(bounds) - 1):
        tid = k + 1
        intervals[tid] = (bounds[k], bounds[k + 1])
        start_of[bounds[k]] = tid
        end_of[tid] = bounds[k + 1]
        type_lengths[tid] = bounds[k + 1] - bounds[k]

    # Atom-level conversion pass in the same preorder.
    ancestral = [(tid, FORWARD) for tid in sorted(intervals)]
    atom_states: dict[str, list[tuple[int, int]]] = {}
    hist_events: dict[str, list] = {}
    events_by_branch: dict[str, int] = {}
    visible_by_branch: dict[str, int] = {}
    min_bp = config.min_atom_bp
    for node in nodes:
        seq = (
            list(ancestral)
            if node.parent is None
            else list(atom_states[node.parent.name])
        )
        events, seq, touched = _convert_branch_events(
            seq, bp_events[node.name], type_lengths
        )
        if events:
            hist_events[node.name] = events
        atom_states[node.name] = seq
        events_by_branch[node.name] = len(events)
        visible_by_branch[node.name] = sum(
            1
            for tids in touched
            if any(type_lengths[t] >= min_bp for t in tids)
        )

    history = History(
        species_tree=species_tree,
        root_branch_length=params.root_branch_length,
        ancestral=ancestral,
        events=hist_events,
    )
    replay = replay_history(history, type_lengths)

    # Cross-check all three derivations of every leaf layout.
    for leaf in species_tree.leaf_names():
        by_replay = [(a.type_id, a.strand) for a in replay.extant[leaf].atoms]
        by_convert = atom_states[leaf]
        root, strand = site_states[leaf]
        by_sites = _atoms_from_sites(
            root, strand, cuts, start_of, end_of, type_lengths
        )
        if not (by_replay == by_convert == by_sites):
            raise SimulatorError(f"leaf {leaf}: truth layouts disagree")

    # Nucleotides: ancestral content, then per-type descent.
    pi_cum = np.cumsum(hky.pi)
    root_codes = np.searchsorted(pi_cum, rng.random(n0), side="right").astype(
        np.uint8
    )
    np.minimum(root_codes, 3, out=root_codes)
    node_times = species_tree.node_times(params.root_branch_length)
    contents: dict[tuple[str, int], np.ndarray] = {}
    for tid in sorted(replay.segment_trees):
        tree = replay.segment_trees[tid]
        a, b = intervals[tid]
        label, depth = _first_leaf_depth(tree)
        stem = node_times[label[0]] - depth
        if stem < -1e-9:
            raise SimulatorError(f"type {tid}: negative stem time {stem}")
        store = _synthesize_type(rng, tree, root_codes[a:b], max(stem, 0.0), hky)
        contents.update(store)

    fastas: dict[str, str] = {}
    table = AtomTable()
    for leaf in species_tree.leaf_names():
        chunks = []
        pos = 0
        for idx, atom in enumerate(replay.extant[leaf].atoms):
            codes = contents[(leaf, idx)]
            if atom.strand == REVERSE:
                codes = revcomp_codes(codes)
            chunks.append(codes_to_str(codes))
            end = pos + type_lengths[atom.type_id]
            table.add(atom, AtomCoords(leaf, leaf, pos, end))
            pos = end
        fastas[leaf] = "".join(chunks)

    log.info(
        "simulated cluster: %d events, %d types, %d cuts",
        history.event_count(),
        len(type_lengths),
        len(bounds) - 2,
    )
    return SimulatedCluster(
        species_tree=species_tree,
        seed=seed,
        ancestral_length=n0,
        type_lengths=type_lengths,
        intervals=intervals,
        history=history,
        replay=replay,
        table=table,
        fastas=fastas,
        events_by_branch=events_by_branch,
        visible_by_branch=visible_by_branch,
        bp_events=bp_events,
    )


def filter_short_atoms(table: AtomTable, min_bp: int) -> AtomTable:
    """Drop every atom whose type is shorter than min_bp.

    Coordinates are kept as they are, so the filtered table has gaps where
    short atoms used to sit; downstream code slices by coordinates and
    never assumes contiguity.
    """
    out = AtomTable()
    for species in table.species_list():
        for atom in table.sequences[species].atoms:
            if table.type_lengths[atom.type_id] >= min_bp:
                out.add(atom, table.coords[atom.id])
    return out


def segment_tree_to_newick(tree) -> str:
    """Render a truth segment tree as a rooted Newick string."""

    def conv(node) -> Clade:
        if node[0] == "L":
            species, idx = node[1]
            return Clade(name=f"{species}|{idx}")
        clade = Clade(name="")
        for child, t in node[1]:
            sub = conv(child)
            sub.length = t
            clade.children.append(sub)
        return clade

    return write_newick(conv(tree))


def write_segment_trees(path, segment_trees: dict[int, tuple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# type_id\tnewick\n")
        for tid in sorted(segment_trees):
            fh.write(f"{tid}\t{segment_tree_to_newick(segment_trees[tid])}\n")
