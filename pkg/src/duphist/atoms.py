"""Atoms, atom types and atomic sequences.

An atom is a contiguous stretch of sequence delimited by breakpoints;
atoms with (near-)identical content share an atom type. A sequence is
an ordered, stranded list of atom instances. Strands are +1/-1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

FORWARD = 1
REVERSE = -1

_STRAND_STR = {FORWARD: "+", REVERSE: "-"}
_STRAND_VAL = {"+": FORWARD, "-": REVERSE}


class AtomError(ValueError):
    pass


@dataclass(frozen=True)
class AtomInstance:
    id: int
    type_id: int
    strand: int  # FORWARD or REVERSE

    def __post_init__(self):
        if self.strand not in (FORWARD, REVERSE):
            raise AtomError(f"bad strand {self.strand!r}")


@dataclass
class AtomicSequence:
    species: str
    atoms: list[AtomInstance] = field(default_factory=list)

    def type_strand(self) -> tuple[tuple[int, int], ...]:
        return tuple((a.type_id, a.strand) for a in self.atoms)

    def __len__(self) -> int:
        return len(self.atoms)


def strand_str(strand: int) -> str:
    return _STRAND_STR[strand]


def strand_val(text: str) -> int:
    try:
        return _STRAND_VAL[text]
    except KeyError:
        raise AtomError(f"bad strand field {text!r}") from None


def normalize_adjacency(
    left: tuple[int, int], right: tuple[int, int]
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Canonical form of a stranded type adjacency.

    (x, y) and (reverse of y, reverse of x) describe the same junction
    read from the two strands; the lexicographically smaller of the two
    is the canonical representative.
    """
    mirrored = ((right[0], -right[1]), (left[0], -left[1]))
    pair = (left, right)
    return pair if pair <= mirrored else mirrored


def iter_adjacencies(seqs) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    out = []
    for seq in seqs:
        atoms = seq.atoms if isinstance(seq, AtomicSequence) else seq
        for a, b in zip(atoms, atoms[1:]):
            out.append(
                normalize_adjacency((a.type_id, a.strand), (b.type_id, b.strand))
            )
    return out


def adjacent_pair_count(seqs) -> int:
    """Number of distinct stranded type adjacencies across sequences."""
    return len(set(iter_adjacencies(seqs)))


@dataclass
class AtomCoords:
    species: str
    seq_name: str
    start: int  # 0-based inclusive, bp
    end: int  # exclusive, bp


class AtomTable:
    """Atom types, per-species atom sequences and bp coordinates."""

    def __init__(self):
        self.type_lengths: dict[int, int] = {}
        self.sequences: dict[str, AtomicSequence] = {}
        self.coords: dict[int, AtomCoords] = {}

    def species_list(self) -> list[str]:
        return sorted(self.sequences)

    def add(self, atom: AtomInstance, coords: AtomCoords) -> None:
        if atom.id in self.coords:
            raise AtomError(f"duplicate atom id {atom.id}")
        seq = self.sequences.setdefault(
            coords.species, AtomicSequence(coords.species)
        )
        seq.atoms.append(atom)
        self.coords[atom.id] = coords
        length = coords.end - coords.start
        known = self.type_lengths.get(atom.type_id)
        if known is None:
            self.type_lengths[atom.type_id] = length
        elif known != length:
            raise AtomError(
                f"type {atom.type_id} has instances of unequal length "
                f"({known} vs {length})"
            )

    def validate(self) -> list[str]:
        problems = []
        for species, seq in sorted(self.sequences.items()):
            last_end = None
            for atom in seq.atoms:
                c = self.coords[atom.id]
                if c.end <= c.start:
                    problems.append(f"atom {atom.id}: empty span")
                if last_end is not None and c.start < last_end:
                    problems.append(
                        f"atom {atom.id} in {species}: overlaps previous atom"
                    )
                last_end = c.end
        for tid, length in sorted(self.type_lengths.items()):
            if length <= 0:
                problems.append(f"type {tid}: nonpositive length")
        return problems


ATOMS_COLUMNS = ("atom_id", "type_id", "species", "seq_name", "start", "end", "strand")


def read_atoms_tsv(path: str) -> AtomTable:
    table = AtomTable()
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != len(ATOMS_COLUMNS):
                raise AtomError(
                    f"{path}:{lineno}: expected {len(ATOMS_COLUMNS)} columns, "
                    f"got {len(parts)}"
                )
            try:
                rows.append(
                    (
                        int(parts[0]),
                        int(parts[1]),
                        parts[2],
                        parts[3],
                        int(parts[4]),
                        int(parts[5]),
                        strand_val(parts[6]),
                    )
                )
            except ValueError as exc:
                raise AtomError(f"{path}:{lineno}: {exc}") from None
    # atoms are stored per species in left-to-right order
    rows.sort(key=lambda r: (r[2], r[3], r[4]))
    for atom_id, type_id, species, seq_name, start, end, strand in rows:
        table.add(
            AtomInstance(atom_id, type_id, strand),
            AtomCoords(species, seq_name, start, end),
        )
    problems = table.validate()
    if problems:
        raise AtomError("; ".join(problems))
    return table


def write_atoms_tsv(path: str, table: AtomTable) -> None:
    with open(path, "w") as fh:
        fh.write("# " + "\t".join(ATOMS_COLUMNS) + "\n")
        for species in table.species_list():
            for atom in table.sequences[species].atoms:
                c = table.coords[atom.id]
                fh.write(
                    f"{atom.id}\t{atom.type_id}\t{c.species}\t{c.seq_name}\t"
                    f"{c.start}\t{c.end}\t{strand_str(atom.strand)}\n"
                )
