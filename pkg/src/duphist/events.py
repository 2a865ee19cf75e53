"""History events and the apply/unwind operations on atomic sequences.

Coordinates are atom indices into the sequence as it exists just before
the event (for apply) or just after it (for unwind). Duplications insert
the copy before the atom at ``insert_pos``; the insertion point must lie
outside the source span. bp geometry fields are caches filled in during
replay and never affect apply/unwind semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .atoms import AtomInstance, AtomicSequence

LEFT_TO_RIGHT = "L2R"  # source left of target
RIGHT_TO_LEFT = "R2L"


class EventError(ValueError):
    pass


@dataclass
class Duplication:
    src_start: int
    src_end: int
    insert_pos: int
    inverted: bool
    # bp geometry, derived during replay
    length_bp: int | None = None
    distance_bp: int | None = None
    centroid_bp: float | None = None

    @property
    def direction(self) -> str:
        return LEFT_TO_RIGHT if self.insert_pos >= self.src_end else RIGHT_TO_LEFT

    def span_len(self) -> int:
        return self.src_end - self.src_start

    def check(self, seq_len: int) -> None:
        if not (0 <= self.src_start < self.src_end <= seq_len):
            raise EventError(
                f"duplication source [{self.src_start},{self.src_end}) out of "
                f"bounds for length {seq_len}"
            )
        if not (0 <= self.insert_pos <= seq_len):
            raise EventError(f"insert position {self.insert_pos} out of bounds")
        if self.src_start < self.insert_pos < self.src_end:
            raise EventError("insertion point inside the source span")


@dataclass
class Deletion:
    start: int
    end: int
    length_bp: int | None = None
    centroid_bp: float | None = None

    def span_len(self) -> int:
        return self.end - self.start

    def check(self, seq_len: int) -> None:
        if not (0 <= self.start < self.end <= seq_len):
            raise EventError(
                f"deletion [{self.start},{self.end}) out of bounds for "
                f"length {seq_len}"
            )


@dataclass
class Speciation:
    parent_species: str
    child_a: str
    child_b: str
    # spans into the parent sequence that are absent from each child
    deletions_a: list[tuple[int, int]] = field(default_factory=list)
    deletions_b: list[tuple[int, int]] = field(default_factory=list)


Event = Duplication | Deletion


def _check_spans(spans: list[tuple[int, int]], seq_len: int, label: str) -> None:
    last = 0
    for start, end in spans:
        if not (0 <= start < end <= seq_len):
            raise EventError(f"{label} span [{start},{end}) out of bounds")
        if start < last:
            raise EventError(f"{label} spans overlap or are unsorted")
        last = end


class InstanceMinter:
    """Source of fresh atom instance ids."""

    def __init__(self, start: int = 0):
        self.next_id = start

    def mint(self, type_id: int, strand: int) -> AtomInstance:
        atom = AtomInstance(self.next_id, type_id, strand)
        self.next_id += 1
        return atom


def duplicate_atoms(
    atoms: list[AtomInstance], inverted: bool, minter: InstanceMinter
) -> tuple[list[AtomInstance], list[tuple[AtomInstance, AtomInstance]]]:
    """Fresh copies of ``atoms``; also returns (source, copy) pairs."""
    pairs = []
    copies = []
    ordered = list(reversed(atoms)) if inverted else atoms
    for src in ordered:
        strand = -src.strand if inverted else src.strand
        copy = minter.mint(src.type_id, strand)
        copies.append(copy)
        pairs.append((src, copy))
    return copies, pairs


def apply_duplication(
    seq: AtomicSequence, d: Duplication, minter: InstanceMinter
) -> tuple[AtomicSequence, list[tuple[AtomInstance, AtomInstance]]]:
    d.check(len(seq))
    source = seq.atoms[d.src_start : d.src_end]
    copies, pairs = duplicate_atoms(source, d.inverted, minter)
    atoms = seq.atoms[: d.insert_pos] + copies + seq.atoms[d.insert_pos :]
    return AtomicSequence(seq.species, atoms), pairs


def apply_deletion(
    seq: AtomicSequence, d: Deletion
) -> tuple[AtomicSequence, list[AtomInstance]]:
    d.check(len(seq))
    removed = seq.atoms[d.start : d.end]
    atoms = seq.atoms[: d.start] + seq.atoms[d.end :]
    return AtomicSequence(seq.species, atoms), removed


def apply_speciation(
    seq: AtomicSequence, s: Speciation, minter: InstanceMinter
) -> tuple[AtomicSequence, AtomicSequence, list[tuple[AtomInstance, AtomInstance]]]:
    """Copy the parent sequence into both children.

    Returns the two child sequences and (parent, child) lineage pairs;
    atoms inside deletions_a are missing from child a, likewise for b.
    An atom may not be deleted from both children.
    """
    _check_spans(s.deletions_a, len(seq), "deletions_a")
    _check_spans(s.deletions_b, len(seq), "deletions_b")
    gone_a = {i for start, end in s.deletions_a for i in range(start, end)}
    gone_b = {i for start, end in s.deletions_b for i in range(start, end)}
    if gone_a & gone_b:
        raise EventError("atom deleted from both speciation children")
    atoms_a, atoms_b, pairs = [], [], []
    for i, atom in enumerate(seq.atoms):
        if i not in gone_a:
            child = minter.mint(atom.type_id, atom.strand)
            atoms_a.append(child)
            pairs.append((atom, child))
        if i not in gone_b:
            child = minter.mint(atom.type_id, atom.strand)
            atoms_b.append(child)
            pairs.append((atom, child))
    return (
        AtomicSequence(s.child_a, atoms_a),
        AtomicSequence(s.child_b, atoms_b),
        pairs,
    )


def placed_copy_span(d: Duplication) -> tuple[int, int]:
    """Where the copy sits in the post-event sequence."""
    return d.insert_pos, d.insert_pos + d.span_len()


def placed_source_span(d: Duplication) -> tuple[int, int]:
    shift = d.span_len() if d.insert_pos <= d.src_start else 0
    return d.src_start + shift, d.src_end + shift


def unwind_duplication(seq: AtomicSequence, d: Duplication) -> AtomicSequence:
    """Remove the copy of the most recent duplication.

    Precondition: the copy is present and intact, i.e. the post-event
    placement still matches the source in types and strand pattern.
    """
    c0, c1 = placed_copy_span(d)
    s0, s1 = placed_source_span(d)
    if c1 > len(seq) or s1 > len(seq):
        raise EventError("duplication does not fit the sequence")
    copy = seq.atoms[c0:c1]
    source = seq.atoms[s0:s1]
    ordered = list(reversed(copy)) if d.inverted else copy
    for src, cp in zip(source, ordered):
        expected = -src.strand if d.inverted else src.strand
        if cp.type_id != src.type_id or cp.strand != expected:
            raise EventError("copy does not mirror the source; cannot unwind")
    atoms = seq.atoms[:c0] + seq.atoms[c1:]
    return AtomicSequence(seq.species, atoms)


def unwind_deletion(
    seq: AtomicSequence, d: Deletion, content: list[AtomInstance]
) -> AtomicSequence:
    """Re-insert ``content`` at the deletion site (most recent event)."""
    if len(content) != d.span_len():
        raise EventError("deletion content does not match the span")
    if not (0 <= d.start <= len(seq)):
        raise EventError("deletion site out of bounds")
    atoms = seq.atoms[: d.start] + list(content) + seq.atoms[d.start :]
    return AtomicSequence(seq.species, atoms)


def unwind_speciation(
    seq_a: AtomicSequence,
    seq_b: AtomicSequence,
    s: Speciation,
    minter: InstanceMinter,
) -> AtomicSequence:
    """Merge two child sequences back into the parent sequence.

    Matched positions must agree in type and strand; each parent atom is
    taken from whichever child retains it.
    """
    n = len(seq_a) + sum(e - s0 for s0, e in s.deletions_a)
    gone_a = {i for start, end in s.deletions_a for i in range(start, end)}
    gone_b = {i for start, end in s.deletions_b for i in range(start, end)}
    if gone_a & gone_b:
        raise EventError("atom deleted from both speciation children")
    atoms = []
    ia = ib = 0
    for i in range(n):
        take_a = i not in gone_a
        take_b = i not in gone_b
        if take_a:
            if ia >= len(seq_a):
                raise EventError("child a shorter than speciation describes")
            a = seq_a.atoms[ia]
            ia += 1
        if take_b:
            if ib >= len(seq_b):
                raise EventError("child b shorter than speciation describes")
            b = seq_b.atoms[ib]
            ib += 1
        if take_a and take_b:
            if (a.type_id, a.strand) != (b.type_id, b.strand):
                raise EventError(f"children disagree at parent position {i}")
            atoms.append(minter.mint(a.type_id, a.strand))
        elif take_a:
            atoms.append(minter.mint(a.type_id, a.strand))
        else:
            atoms.append(minter.mint(b.type_id, b.strand))
    if ia != len(seq_a) or ib != len(seq_b):
        raise EventError("children longer than speciation describes")
    if len(atoms) != n:
        raise EventError("speciation spans inconsistent with child lengths")
    return AtomicSequence(s.parent_species, atoms)


def clone_event(e: Event) -> Event:
    return replace(e)
