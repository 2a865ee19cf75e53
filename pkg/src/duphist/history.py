"""Histories: ordered events on species-tree branches plus an ancestral sequence.

A history fully determines the evolution of an atomic sequence down the
species tree. Replaying it forward yields the extant sequences, per-event
bp geometry for scoring, and one segment tree per atom type. Event times
inside a branch are deterministic: event j of k on a branch of length L
sits at depth L*(j+1)/(k+1) below the branch top, so equal histories give
equal segment trees.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .atoms import AtomicSequence, AtomTable, strand_str, strand_val
from .events import (
    Deletion,
    Duplication,
    Event,
    EventError,
    InstanceMinter,
    apply_deletion,
    apply_duplication,
)
from .species_tree import SpeciesTree

HISTORY_MAGIC = "# duphist history v1"


class HistoryError(ValueError):
    pass


@dataclass
class History:
    species_tree: SpeciesTree
    root_branch_length: float
    ancestral: list[tuple[int, int]]  # (type_id, strand) pairs
    events: dict[str, list[Event]] = field(default_factory=dict)

    def event_count(self) -> int:
        return sum(len(v) for v in self.events.values())

    def counts_by_branch(self) -> dict[str, tuple[int, int]]:
        out = {}
        for branch in self.species_tree.branch_names():
            evs = self.events.get(branch, [])
            ndup = sum(1 for e in evs if isinstance(e, Duplication))
            out[branch] = (ndup, len(evs) - ndup)
        return out


def serialize_history(h: History) -> tuple:
    """Hashable canonical key; equal histories share a key."""
    evs = []
    for branch in h.species_tree.branch_names():
        for e in h.events.get(branch, []):
            if isinstance(e, Duplication):
                evs.append(
                    (branch, "d", e.src_start, e.src_end, e.insert_pos, e.inverted)
                )
            else:
                evs.append((branch, "x", e.start, e.end))
    return (tuple(h.ancestral), tuple(evs))


@dataclass
class ScoredEvent:
    branch: str
    index: int
    event: Event  # copy with bp geometry filled
    len_before_bp: int


@dataclass
class ReplayResult:
    extant: dict[str, AtomicSequence]
    scored: list[ScoredEvent]
    branch_events: dict[str, list[ScoredEvent]]
    segment_trees: dict[int, tuple]
    # leaf labels used in segment trees are (species, atom index)
    ancestral_atoms: list


def _bp_prefix(seq: AtomicSequence, type_lengths: dict[int, int]) -> list[int]:
    pref = [0]
    for atom in seq.atoms:
        pref.append(pref[-1] + type_lengths[atom.type_id])
    return pref


def _fill_dup_geometry(
    d: Duplication, seq: AtomicSequence, type_lengths: dict[int, int]
) -> Duplication:
    pref = _bp_prefix(seq, type_lengths)
    s0, s1 = pref[d.src_start], pref[d.src_end]
    p = pref[d.insert_pos]
    gap = p - s1 if d.insert_pos >= d.src_end else s0 - p
    left = min(s0, p)
    right = max(s1, p)
    return replace(
        d,
        length_bp=s1 - s0,
        distance_bp=gap + 1,
        centroid_bp=(left + right) / 2.0,
    )


def _fill_del_geometry(
    d: Deletion, seq: AtomicSequence, type_lengths: dict[int, int]
) -> Deletion:
    pref = _bp_prefix(seq, type_lengths)
    return replace(
        d,
        length_bp=pref[d.end] - pref[d.start],
        centroid_bp=(pref[d.start] + pref[d.end]) / 2.0,
    )


class _Lineage:
    """Per-instance birth times, parents and branching structure."""

    def __init__(self):
        self.birth: dict[int, float] = {}
        self.type_of: dict[int, int] = {}
        self.copies: dict[int, list[tuple[float, int]]] = {}
        self.death: dict[int, float] = {}
        self.spec_children: dict[int, tuple[float, int, int] | None] = {}
        self.leaf_label: dict[int, tuple[str, int]] = {}
        self.leaf_time: dict[int, float] = {}

    def born(self, inst: int, type_id: int, t: float, parent: int | None):
        self.birth[inst] = t
        self.type_of[inst] = type_id
        if parent is not None:
            self.copies.setdefault(parent, []).append((t, inst))


def replay_history(h: History, type_lengths: dict[int, int]) -> ReplayResult:
    """Run a history forward; raises HistoryError on inconsistency."""
    for tid, _ in h.ancestral:
        if tid not in type_lengths:
            raise HistoryError(f"ancestral atom type {tid} has no known length")
    seen = set()
    for tid, _ in h.ancestral:
        if tid in seen:
            raise HistoryError(f"type {tid} occurs twice in the ancestral sequence")
        seen.add(tid)
    for branch in h.events:
        if branch not in h.species_tree.nodes:
            raise HistoryError(f"events on unknown branch {branch!r}")

    tree = h.species_tree
    times = tree.node_times(h.root_branch_length)
    minter = InstanceMinter()
    lin = _Lineage()

    atoms = []
    for tid, strand in h.ancestral:
        a = minter.mint(tid, strand)
        lin.born(a.id, tid, 0.0, None)
        atoms.append(a)
    root_seq = AtomicSequence(tree.root.name, atoms)

    extant: dict[str, AtomicSequence] = {}
    scored: list[ScoredEvent] = []
    branch_events: dict[str, list[ScoredEvent]] = {}

    def process(node, seq_top: AtomicSequence):
        name = node.name
        length = tree.branch_length(name, h.root_branch_length)
        t_top = times[name] - length
        events = h.events.get(name, [])
        k = len(events)
        seq = seq_top
        branch_events[name] = []
        for j, ev in enumerate(events):
            t = t_top + length * (j + 1) / (k + 1)
            pref_total = sum(type_lengths[a.type_id] for a in seq.atoms)
            try:
                if isinstance(ev, Duplication):
                    ev.check(len(seq))
                    filled = _fill_dup_geometry(ev, seq, type_lengths)
                    seq, pairs = apply_duplication(seq, ev, minter)
                    for src, cp in pairs:
                        lin.born(cp.id, cp.type_id, t, src.id)
                elif isinstance(ev, Deletion):
                    ev.check(len(seq))
                    filled = _fill_del_geometry(ev, seq, type_lengths)
                    seq, removed = apply_deletion(seq, ev)
                    for atom in removed:
                        lin.death[atom.id] = t
                else:
                    raise HistoryError(f"unsupported event type {type(ev).__name__}")
            except EventError as exc:
                raise HistoryError(f"branch {name}, event {j}: {exc}") from exc
            rec = ScoredEvent(name, j, filled, pref_total)
            scored.append(rec)
            branch_events[name].append(rec)
        if node.is_leaf():
            for idx, atom in enumerate(seq.atoms):
                lin.leaf_label[atom.id] = (name, idx)
                lin.leaf_time[atom.id] = times[name]
            extant[name] = seq
        else:
            t_node = times[name]
            for child in node.children:
                child_atoms = []
                for atom in seq.atoms:
                    ca = minter.mint(atom.type_id, atom.strand)
                    lin.born(ca.id, ca.type_id, t_node, None)
                    lin.spec_children.setdefault(atom.id, []).append((t_node, ca.id))
                    child_atoms.append(ca)
                process(child, AtomicSequence(child.name, child_atoms))

    process(tree.root, root_seq)

    segment_trees = _build_segment_trees(h, lin, root_seq)
    return ReplayResult(
        extant=extant,
        scored=scored,
        branch_events=branch_events,
        segment_trees=segment_trees,
        ancestral_atoms=list(root_seq.atoms),
    )


def _build_segment_trees(h: History, lin: _Lineage, root_seq) -> dict[int, tuple]:
    def build(inst: int):
        """Return (subtree, time_at_top) or None if no extant descendants.

        Subtrees are ('L', label) leaves or ('N', children) nodes where
        children are ((subtree, edge_length), ...) sorted canonically.
        """
        branchings = sorted(lin.copies.get(inst, ()))
        if inst in lin.leaf_label:
            cur = ("L", lin.leaf_label[inst])
            cur_t = lin.leaf_time[inst]
        elif inst in lin.spec_children:
            kids = []
            t_node = None
            for t, child in sorted(lin.spec_children[inst]):
                sub = build(child)
                t_node = t
                if sub is not None:
                    kids.append((sub[0], sub[1] - t))
            if not kids:
                cur, cur_t = None, None
            elif len(kids) == 1:
                # unary: child keeps its own top time, edge re-derived above
                cur = kids[0][0]
                cur_t = t_node + kids[0][1]
            else:
                cur = ("N", _sort_children(kids))
                cur_t = t_node
        else:
            cur, cur_t = None, None  # deleted or dangling
        for t, copy in reversed(branchings):
            sub = build(copy)
            kids = []
            if sub is not None:
                kids.append((sub[0], sub[1] - t))
            if cur is not None:
                kids.append((cur, cur_t - t))
            if not kids:
                cur, cur_t = None, None
            elif len(kids) == 1:
                cur = kids[0][0]
                cur_t = t + kids[0][1]
            else:
                cur = ("N", _sort_children(kids))
                cur_t = t
        if cur is None:
            return None
        return cur, cur_t

    trees: dict[int, tuple] = {}
    for atom in root_seq.atoms:
        built = build(atom.id)
        if built is None:
            continue
        sub, t_top = built
        # a zero-length stem above the first branching point
        trees[atom.type_id] = sub
    return trees


def _min_leaf(sub) -> tuple:
    if sub[0] == "L":
        return sub[1]
    return min(_min_leaf(child) for child, _len in sub[1])


def _sort_children(kids):
    return tuple(sorted(kids, key=lambda kl: _min_leaf(kl[0])))


def segment_tree_leaves(sub) -> list:
    if sub[0] == "L":
        return [sub[1]]
    out = []
    for child, _len in sub[1]:
        out.extend(segment_tree_leaves(child))
    return out


def validate_history(
    h: History, table: AtomTable, type_lengths: dict[int, int] | None = None
) -> list[str]:
    """Replay and compare against observed sequences; [] means valid.

    ``type_lengths`` widens the type universe beyond the observed table,
    which a history needs when some of its types left no extant copies.
    """
    problems: list[str] = []
    try:
        result = replay_history(h, type_lengths or table.type_lengths)
    except (HistoryError, EventError) as exc:
        return [str(exc)]
    leaf_names = set(h.species_tree.leaf_names())
    data_species = set(table.sequences)
    for missing in sorted(data_species - leaf_names):
        problems.append(f"species {missing!r} not a leaf of the species tree")
    for missing in sorted(leaf_names - data_species):
        problems.append(f"leaf {missing!r} has no observed sequence")
    for species in sorted(data_species & leaf_names):
        got = result.extant[species].type_strand()
        want = table.sequences[species].type_strand()
        if got != want:
            problems.append(
                f"replay mismatch in {species}: got {got}, expected {want}"
            )
    return problems


def write_history(fh, h: History, meta: dict | None = None) -> None:
    fh.write(HISTORY_MAGIC + "\n")
    if meta:
        for key in sorted(meta):
            fh.write(f"# {key}: {meta[key]}\n")
    fh.write(f"# species_tree: {h.species_tree.to_newick()}\n")
    fh.write(f"# root_branch_length: {h.root_branch_length:.10g}\n")
    for tid, strand in h.ancestral:
        fh.write(f"anc\t{tid}\t{strand_str(strand)}\n")
    for branch in h.species_tree.branch_names():
        for i, e in enumerate(h.events.get(branch, [])):
            if isinstance(e, Duplication):
                fh.write(
                    f"event\t{branch}\t{i}\tdup\t{e.src_start}\t{e.src_end}\t"
                    f"{e.insert_pos}\t{1 if e.inverted else 0}\n"
                )
            else:
                fh.write(f"event\t{branch}\t{i}\tdel\t{e.start}\t{e.end}\n")


def write_history_file(path: str, h: History, meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        write_history(fh, h, meta)


def parse_history_lines(lines) -> History:
    tree: SpeciesTree | None = None
    root_len: float | None = None
    ancestral: list[tuple[int, int]] = []
    events: dict[str, list[tuple[int, Event]]] = {}
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("species_tree:"):
                tree = SpeciesTree.from_newick(body.split(":", 1)[1].strip())
            elif body.startswith("root_branch_length:"):
                root_len = float(body.split(":", 1)[1].strip())
            continue
        parts = line.split("\t")
        if parts[0] == "anc":
            if len(parts) != 3:
                raise HistoryError(f"bad anc line: {line!r}")
            ancestral.append((int(parts[1]), strand_val(parts[2])))
        elif parts[0] == "event":
            branch, ordinal, kind = parts[1], int(parts[2]), parts[3]
            if kind == "dup":
                ev: Event = Duplication(
                    int(parts[4]), int(parts[5]), int(parts[6]), parts[7] == "1"
                )
            elif kind == "del":
                ev = Deletion(int(parts[4]), int(parts[5]))
            else:
                raise HistoryError(f"unknown event kind {kind!r}")
            events.setdefault(branch, []).append((ordinal, ev))
        else:
            raise HistoryError(f"unrecognized line: {line!r}")
    if tree is None or root_len is None:
        raise HistoryError("history lacks species_tree or root_branch_length")
    ordered = {
        branch: [e for _i, e in sorted(pairs, key=lambda p: p[0])]
        for branch, pairs in events.items()
    }
    return History(tree, root_len, ancestral, ordered)


def read_history_file(path: str) -> History:
    with open(path) as fh:
        return parse_history_lines(fh)


def write_history_stream(fh, entries) -> None:
    """Concatenated history blocks; each (history, meta) starts with the
    magic line so the stream reader can split them apart again."""
    for h, meta in entries:
        write_history(fh, h, meta)


def read_history_stream(path: str) -> list[tuple[History, dict]]:
    """Read back a stream of history blocks with their '# key: value' meta.

    Meta keys claimed by the base format (species_tree, root branch) are
    not reported; everything else is returned as strings.
    """
    blocks: list[list[str]] = []
    with open(path) as fh:
        for line in fh:
            if line.rstrip("\n") == HISTORY_MAGIC:
                blocks.append([])
                continue
            if not blocks:
                raise HistoryError("history stream does not start with the magic line")
            blocks[-1].append(line)
    out = []
    for lines in blocks:
        meta = {}
        for line in lines:
            if not line.startswith("#"):
                continue
            body = line[1:].strip()
            key, sep, value = body.partition(":")
            key = key.strip()
            if sep and key not in ("species_tree", "root_branch_length"):
                meta[key] = value.strip()
        out.append((parse_history_lines(lines), meta))
    return out
