"""FASTA input/output and per-cluster data assembly.

Extant sequences arrive as FASTA keyed by sequence name, atom coordinates
as a table; this module slices atom content out of the sequences, reverse
complements minus-strand atoms, and groups the encoded columns per type so
the likelihood machinery can treat every type as an independent alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atoms import REVERSE, AtomTable
from .model import ClusterData
from .substitution import MISSING, encode_sequence

_COMPLEMENT = str.maketrans("ACGTacgtN", "TGCAtgcaN")


class FastaError(ValueError):
    """Raised when a FASTA stream is malformed."""


def read_fasta(fh) -> dict[str, str]:
    """Parse FASTA from a text stream into name -> sequence.

    The name is the first whitespace-delimited token after '>'.
    """
    out: dict[str, str] = {}
    name = None
    parts: list[str] = []
    for raw in fh:
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            if name is not None:
                out[name] = "".join(parts)
            name = line[1:].split()[0] if len(line) > 1 else ""
            if not name:
                raise FastaError("empty sequence name in FASTA header")
            if name in out:
                raise FastaError(f"duplicate sequence name {name!r}")
            parts = []
        else:
            if name is None:
                raise FastaError("sequence data before first FASTA header")
            parts.append(line)
    if name is not None:
        out[name] = "".join(parts)
    return out


def read_fasta_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return read_fasta(fh)


def write_fasta(fh, sequences: dict[str, str], width: int = 80) -> None:
    for name in sequences:
        fh.write(f">{name}\n")
        seq = sequences[name]
        for i in range(0, len(seq), width):
            fh.write(seq[i : i + width] + "\n")
        if not seq:
            fh.write("\n")


def write_fasta_file(path, sequences: dict[str, str], width: int = 80) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_fasta(fh, sequences, width)


def revcomp(seq: str) -> str:
    """Reverse complement of a nucleotide string (N maps to N)."""
    return seq.translate(_COMPLEMENT)[::-1]


def revcomp_codes(codes: np.ndarray) -> np.ndarray:
    """Reverse complement of an encoded array; MISSING stays MISSING."""
    out = codes[::-1].copy()
    known = out < 4
    out[known] = 3 - out[known]
    return out


@dataclass(frozen=True)
class ClusterInputError(Exception):
    """Raised when atoms and FASTA sequences do not line up."""

    message: str

    def __str__(self) -> str:
        return self.message


def build_cluster_data(table: AtomTable, fastas: dict[str, str]) -> ClusterData:
    """Slice atom content out of extant sequences and group it per type.

    Alignment rows are keyed by (species, atom index within that species)
    so they can be matched against segment tree leaves.  Minus-strand atoms
    are reverse complemented, which puts every row in the type's forward
    frame.
    """
    problems = table.validate()
    if problems:
        raise ClusterInputError("invalid atom table: " + "; ".join(problems))
    alignments: dict[int, dict[tuple[str, int], np.ndarray]] = {}
    for species in table.species_list():
        for idx, atom in enumerate(table.sequences[species].atoms):
            coords = table.coords[atom.id]
            seq = fastas.get(coords.seq_name)
            if seq is None:
                raise ClusterInputError(
                    f"atom table references sequence {coords.seq_name!r} "
                    "missing from the FASTA input"
                )
            if coords.end > len(seq):
                raise ClusterInputError(
                    f"atom {coords.seq_name}:{coords.start}-{coords.end} "
                    f"runs past the end of its sequence ({len(seq)}bp)"
                )
            chunk = seq[coords.start : coords.end]
            codes = encode_sequence(chunk)
            if atom.strand == REVERSE:
                codes = revcomp_codes(codes)
            alignments.setdefault(atom.type_id, {})[(species, idx)] = codes
    for tid, rows in alignments.items():
        lengths = {len(codes) for codes in rows.values()}
        if len(lengths) > 1:
            raise ClusterInputError(f"type {tid} has rows of unequal length: {sorted(lengths)}")
    return ClusterData(table=table, type_alignments=alignments)


def mask_unknown_fraction(alignment: dict[tuple[str, int], np.ndarray]) -> float:
    """Fraction of MISSING cells across an alignment (0.0 when empty)."""
    total = 0
    unknown = 0
    for codes in alignment.values():
        total += codes.size
        unknown += int(np.count_nonzero(codes == MISSING))
    return unknown / total if total else 0.0
