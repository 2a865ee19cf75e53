"""Rooted species tree with named nodes.

Every node names the branch above it; the branch above the root is the
synthetic root branch whose length comes from model parameters rather
than from the Newick file.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .newick import Clade, NewickError, parse_newick, write_newick


class SpeciesTreeError(ValueError):
    pass


@dataclass
class SpeciesNode:
    name: str
    length: float  # branch length above this node; 0.0 for the root
    parent: "SpeciesNode | None" = None
    children: list["SpeciesNode"] = field(default_factory=list)

    def is_leaf(self) -> bool:
        return not self.children


class SpeciesTree:
    def __init__(self, root: SpeciesNode):
        self.root = root
        self.nodes: dict[str, SpeciesNode] = {}
        for node in self.preorder():
            if not node.name:
                raise SpeciesTreeError("species tree nodes must be named")
            if node.name in self.nodes:
                raise SpeciesTreeError(f"duplicate node name {node.name!r}")
            if node.parent is not None and not node.length > 0:
                raise SpeciesTreeError(
                    f"branch above {node.name!r} must have positive length"
                )
            self.nodes[node.name] = node

    def preorder(self) -> list[SpeciesNode]:
        out: list[SpeciesNode] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(node.children))
        return out

    def leaves(self) -> list[SpeciesNode]:
        return [n for n in self.preorder() if n.is_leaf()]

    def leaf_names(self) -> list[str]:
        return [n.name for n in self.leaves()]

    def branch_names(self) -> list[str]:
        """All branch names in preorder, root branch first."""
        return [n.name for n in self.preorder()]

    def branch_length(self, name: str, root_branch_length: float) -> float:
        node = self.nodes[name]
        if node is self.root:
            return root_branch_length
        return node.length

    def node_times(self, root_branch_length: float) -> dict[str, float]:
        """Time of each node measured from the top of the root branch."""
        times: dict[str, float] = {}
        for node in self.preorder():
            if node is self.root:
                times[node.name] = root_branch_length
            else:
                times[node.name] = times[node.parent.name] + node.length
        return times

    def to_newick(self) -> str:
        def conv(node: SpeciesNode) -> Clade:
            clade = Clade(name=node.name)
            if node.parent is not None:
                clade.length = node.length
            clade.children = [conv(c) for c in node.children]
            return clade

        return write_newick(conv(self.root))

    @staticmethod
    def from_newick(text: str) -> "SpeciesTree":
        try:
            clade = parse_newick(text)
        except NewickError as exc:
            raise SpeciesTreeError(str(exc)) from exc
        counter = [0]

        def conv(c: Clade, parent: SpeciesNode | None) -> SpeciesNode:
            name = c.name
            if not name:
                if parent is None:
                    name = "root"
                else:
                    counter[0] += 1
                    name = f"n{counter[0]}"
            node = SpeciesNode(name=name, length=c.length or 0.0, parent=parent)
            node.children = [conv(ch, node) for ch in c.children]
            return node

        return SpeciesTree(conv(clade, None))

    @staticmethod
    def from_file(path: str) -> "SpeciesTree":
        with open(path) as fh:
            text = "".join(
                line for line in fh if line.strip() and not line.startswith("#")
            )
        return SpeciesTree.from_newick(text)


def single_species_tree(name: str) -> SpeciesTree:
    """Degenerate one-node tree used for single-sequence data sets."""
    return SpeciesTree(SpeciesNode(name=name, length=0.0))
