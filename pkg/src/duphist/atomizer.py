"""Window-based atomization of extant sequences.

Sequences are tiled with fixed-width windows; windows that recur elsewhere
(on either strand, above an identity floor) seed atom types with one
instance per occurrence, most-copies-first.  A merge pass then fuses type
pairs that always occur side by side into longer atoms, which compacts
runs of unique sequence into single atoms instead of streams of tiles.
"""

from __future__ import annotations

import logging

import numpy as np

from .atoms import (
    FORWARD,
    REVERSE,
    AtomCoords,
    AtomError,
    AtomInstance,
    AtomTable,
)
from .dataio import revcomp

log = logging.getLogger(__name__)


class AtomizerError(ValueError):
    pass


def _byte_view(seq: str) -> np.ndarray:
    return np.frombuffer(seq.upper().encode("ascii"), dtype=np.uint8)


def _identity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(a == b))


def _window_matches(
    window: str,
    arrays: dict[str, np.ndarray],
    index: dict[str, list[tuple[str, int]]],
    kmer: int,
    identity: float,
) -> list[tuple[str, int, int]]:
    """All (seq_name, start, strand) placements matching one window."""
    width = len(window)
    found: dict[tuple[str, int], int] = {}
    for text, strand in ((window, FORWARD), (revcomp(window), REVERSE)):
        probe = _byte_view(text)
        seen: set[tuple[str, int]] = set()
        for off in range(0, width - kmer + 1):
            for seq_name, pos in index.get(text[off : off + kmer], ()):
                start = pos - off
                key = (seq_name, start)
                if key in seen:
                    continue
                seen.add(key)
                arr = arrays[seq_name]
                if start < 0 or start + width > len(arr):
                    continue
                if _identity(probe, arr[start : start + width]) >= identity:
                    # forward placement wins when both strands match
                    found.setdefault(key, strand)
    return sorted((sn, st, strand) for (sn, st), strand in found.items())


def window_atomize(
    fastas: dict[str, str],
    species_of: dict[str, str] | None = None,
    window_bp: int = 500,
    identity: float = 0.90,
    kmer: int = 16,
) -> AtomTable:
    """Tile sequences into windows and group recurring windows into types.

    ``species_of`` maps sequence names to species; by default every
    sequence name is its own species.  Windows are assigned greedily, the
    one with the most surviving matches first (ties broken by position),
    and any window overlapping already-assigned sequence is discarded.
    The trailing partial window of each sequence is never assigned.
    """
    if window_bp < kmer:
        raise AtomizerError("window_bp must be at least the seed size")
    if not 0.0 < identity <= 1.0:
        raise AtomizerError("identity must be in (0, 1]")
    species_of = species_of or {}
    arrays = {name: _byte_view(seq) for name, seq in fastas.items()}
    index: dict[str, list[tuple[str, int]]] = {}
    for name in sorted(fastas):
        seq = fastas[name].upper()
        for pos in range(0, len(seq) - kmer + 1):
            index.setdefault(seq[pos : pos + kmer], []).append((name, pos))

    windows = []
    for name in sorted(fastas):
        seq = fastas[name].upper()
        for start in range(0, len(seq) - window_bp + 1, window_bp):
            windows.append((name, start))
    matches = {
        (name, start): _window_matches(
            fastas[name].upper()[start : start + window_bp],
            arrays,
            index,
            kmer,
            identity,
        )
        for name, start in windows
    }

    masks = {name: np.zeros(len(arr), dtype=bool) for name, arr in arrays.items()}

    def usable(seq_name: str, start: int) -> bool:
        return not masks[seq_name][start : start + window_bp].any()

    table_rows = []
    next_type = 1
    next_atom = 1
    remaining = list(windows)
    while remaining:
        live = [w for w in remaining if usable(*w)]
        if not live:
            break
        counted = []
        for name, start in live:
            copies = [m for m in matches[(name, start)] if usable(m[0], m[1])]
            counted.append((-len(copies), species_of.get(name, name), name, start, copies))
        counted.sort(key=lambda t: t[:4])
        _, _, name, start, copies = counted[0]
        tid = next_type
        next_type += 1
        for seq_name, pos, strand in copies:
            masks[seq_name][pos : pos + window_bp] = True
            species = species_of.get(seq_name, seq_name)
            table_rows.append(
                (
                    species,
                    seq_name,
                    pos,
                    AtomInstance(next_atom, tid, strand),
                )
            )
            next_atom += 1
        remaining = [w for w in remaining if w != (name, start) and usable(*w)]

    table = AtomTable()
    table_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    for species, seq_name, pos, inst in table_rows:
        table.add(inst, AtomCoords(species, seq_name, pos, pos + window_bp))
    problems = table.validate()
    if problems:
        raise AtomizerError("; ".join(problems))
    log.info(
        "atomized %d sequences into %d atoms over %d types",
        len(fastas),
        len(table.coords),
        len(table.type_lengths),
    )
    return table


def _directed_neighbor(seq_atoms, coords, k: int):
    """Neighbor of atom k read along its own orientation.

    Returns (other_index, (type, relative_strand)) or None when the
    neighbor is absent or not base-pair contiguous.
    """
    atom = seq_atoms[k]
    if atom.strand == FORWARD:
        j = k + 1
        if j >= len(seq_atoms):
            return None
        if coords[atom.id].end != coords[seq_atoms[j].id].start:
            return None
        return j, (seq_atoms[j].type_id, seq_atoms[j].strand)
    j = k - 1
    if j < 0:
        return None
    if coords[seq_atoms[j].id].end != coords[atom.id].start:
        return None
    return j, (seq_atoms[j].type_id, -seq_atoms[j].strand)


def _find_merge_candidate(table: AtomTable):
    """Smallest (left_type, right_type, rel_strand) always-paired types."""
    positions: dict[int, list[tuple[str, int]]] = {}
    for species in table.species_list():
        for k, atom in enumerate(table.sequences[species].atoms):
            positions.setdefault(atom.type_id, []).append((species, k))
    for left_tid in sorted(positions):
        stranded = set()
        pairs = []
        ok = True
        for species, k in positions[left_tid]:
            seq_atoms = table.sequences[species].atoms
            hit = _directed_neighbor(seq_atoms, table.coords, k)
            if hit is None:
                ok = False
                break
            j, entry = hit
            stranded.add(entry)
            pairs.append((species, k, j))
        if not ok or len(stranded) != 1:
            continue
        right_tid, rel = next(iter(stranded))
        if right_tid == left_tid:
            continue
        if len(positions.get(right_tid, ())) != len(pairs):
            continue
        used = {(sp, j) for sp, _, j in pairs}
        if len(used) != len(pairs):
            continue
        if used != set(positions[right_tid]):
            continue
        return left_tid, right_tid, rel, pairs
    return None


def merge_paired_atoms(table: AtomTable) -> AtomTable:
    """Repeatedly fuse type pairs that always occur adjacently.

    Two types merge when every instance of each participates in a
    base-pair contiguous pair reading left-type-then-right-type along the
    left type's orientation (so a mirrored ``right' left'`` occurrence
    also counts).  Coverage never changes; only atom boundaries do.
    """
    while True:
        found = _find_merge_candidate(table)
        if found is None:
            return table
        left_tid, right_tid, _rel, pairs = found
        new_tid = max(table.type_lengths) + 1
        merged: dict[int, AtomInstance] = {}
        drop: set[int] = set()
        span: dict[int, AtomCoords] = {}
        for species, k, j in pairs:
            seq_atoms = table.sequences[species].atoms
            a, b = seq_atoms[k], seq_atoms[j]
            ca, cb = table.coords[a.id], table.coords[b.id]
            merged[a.id] = AtomInstance(a.id, new_tid, a.strand)
            span[a.id] = AtomCoords(
                ca.species, ca.seq_name, min(ca.start, cb.start), max(ca.end, cb.end)
            )
            drop.add(b.id)
        out = AtomTable()
        rows = []
        for species in table.species_list():
            for atom in table.sequences[species].atoms:
                if atom.id in drop:
                    continue
                if atom.id in merged:
                    rows.append((merged[atom.id], span[atom.id]))
                else:
                    rows.append((atom, table.coords[atom.id]))
        rows.sort(key=lambda r: (r[1].species, r[1].seq_name, r[1].start))
        for inst, coords in rows:
            out.add(inst, coords)
        problems = out.validate()
        if problems:
            raise AtomError("; ".join(problems))
        log.debug(
            "merged types %d+%d -> %d (%d pairs)",
            left_tid,
            right_tid,
            new_tid,
            len(pairs),
        )
        table = out


def atomize(
    fastas: dict[str, str],
    species_of: dict[str, str] | None = None,
    window_bp: int = 500,
    identity: float = 0.90,
    kmer: int = 16,
) -> AtomTable:
    """Full atomization: window assignment followed by pair merging."""
    return merge_paired_atoms(
        window_atomize(fastas, species_of, window_bp, identity, kmer)
    )


def coverage_bp(table: AtomTable) -> dict[tuple[str, str], int]:
    """Covered bp per (species, seq_name); merge passes must preserve it."""
    out: dict[tuple[str, str], int] = {}
    for species in table.species_list():
        for atom in table.sequences[species].atoms:
            c = table.coords[atom.id]
            key = (c.species, c.seq_name)
            out[key] = out.get(key, 0) + (c.end - c.start)
    return out
