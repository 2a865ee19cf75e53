"""Graphviz export of a history: the tube-tree view.

Each species-tree node becomes one DOT cluster holding that node's
atomic sequence in genomic order (the root cluster shows the sequence
after the root-stem events). Edges trace every atom's lineage from a
node to its children, fanning out where a duplication on the child
branch copied it. Atom colors are a stable function of the type id.
"""
from __future__ import annotations

import re

from .atoms import AtomicSequence, strand_str
from .events import Deletion, Duplication, InstanceMinter, apply_duplication, apply_deletion
from .history import History, HistoryError


def _type_color(type_id: int) -> str:
    """Stable HSV fill color; the golden-ratio walk keeps hues apart."""
    hue = (type_id * 0.61803398875) % 1.0
    return f"{hue:.4f} 0.40 0.95"


_SAFE = re.compile(r"[^A-Za-z0-9_]")


def _ident(name: str) -> str:
    return _SAFE.sub("_", name)


def tube_tree_dot(h: History) -> str:
    """Render a history as a DOT digraph string."""
    tree = h.species_tree
    minter = InstanceMinter()
    origin: dict[int, tuple[str, int]] = {}

    def run_branch(name: str, seq: AtomicSequence) -> AtomicSequence:
        for j, ev in enumerate(h.events.get(name, [])):
            try:
                if isinstance(ev, Duplication):
                    seq, pairs = apply_duplication(seq, ev, minter)
                    for src, copy in pairs:
                        if src.id in origin:
                            origin[copy.id] = origin[src.id]
                elif isinstance(ev, Deletion):
                    seq, _removed = apply_deletion(seq, ev)
                else:
                    raise HistoryError(
                        f"unsupported event type {type(ev).__name__}"
                    )
            except Exception as exc:
                raise HistoryError(
                    f"branch {name}, event {j}: {exc}"
                ) from exc
        return seq

    stage: dict[str, AtomicSequence] = {}
    edges: list[tuple[tuple[str, int], tuple[str, int]]] = []

    def process(node, seq_top: AtomicSequence) -> None:
        name = node.name
        seq = run_branch(name, seq_top)
        stage[name] = seq
        for i, atom in enumerate(seq.atoms):
            src = origin.pop(atom.id, None)
            if src is not None:
                edges.append((src, (name, i)))
        for child in node.children:
            child_atoms = []
            for i, atom in enumerate(seq.atoms):
                fresh = minter.mint(atom.type_id, atom.strand)
                origin[fresh.id] = (name, i)
                child_atoms.append(fresh)
            process(child, AtomicSequence(child.name, child_atoms))

    atoms = [minter.mint(tid, strand) for tid, strand in h.ancestral]
    process(tree.root, AtomicSequence(tree.root.name, atoms))

    lines = [
        "digraph tubetree {",
        "  rankdir=TB;",
        "  ranksep=1.2;",
        '  node [shape=box, style=filled, fontname="Helvetica"];',
        "  edge [arrowsize=0.5, color=gray40];",
    ]
    order = list(tree.nodes)
    for idx, name in enumerate(order):
        seq = stage.get(name)
        if seq is None:
            continue
        lines.append(f"  subgraph cluster_{idx} {{")
        lines.append(f'    label="{name}";')
        lines.append("    rank=same;")
        nid = _ident(name)
        for i, atom in enumerate(seq.atoms):
            label = f"{atom.type_id}{strand_str(atom.strand)}"
            lines.append(
                f'    {nid}_{i} [label="{label}", '
                f'fillcolor="{_type_color(atom.type_id)}"];'
            )
        for i in range(len(seq.atoms) - 1):
            lines.append(
                f"    {nid}_{i} -> {nid}_{i + 1} "
                "[style=invis, weight=50];"
            )
        lines.append("  }")
    for (pname, pi), (cname, ci) in edges:
        lines.append(f"  {_ident(pname)}_{pi} -> {_ident(cname)}_{ci};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_tubetree(path: str, h: History) -> None:
    dot = tube_tree_dot(h)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dot)
