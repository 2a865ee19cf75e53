"""Per-type guide trees and the MCMC pools the proposal draws from.

Guide trees are unrooted trees over the extant instances of one atom
type, leaf-labelled by (species, atom index). A pool holds thinned
posterior samples per type; short internal branches are collapsed into
multifurcations before a tree enters the pool, because a branch carrying
fewer than a handful of expected substitutions carries no usable signal
about copy order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .newick import Clade, parse_newick, write_newick
from .substitution import HkyParams, pruning_log_likelihood


class GuideTreeError(ValueError):
    pass


class UnrootedTree:
    """Adjacency-map unrooted tree with bp-free branch lengths.

    Internal nodes are anonymous; leaves carry hashable labels. The
    structure stays a tree under every mutation here, with no degree-2
    internal nodes (they are suppressed on creation).
    """

    def __init__(self):
        self.adj: dict[int, dict[int, float]] = {}
        self.leaf_label: dict[int, object] = {}
        self.node_of: dict[object, int] = {}
        self._next = 0

    def _new_node(self) -> int:
        nid = self._next
        self._next += 1
        self.adj[nid] = {}
        return nid

    def add_leaf_node(self, label) -> int:
        if label in self.node_of:
            raise GuideTreeError(f"duplicate leaf label {label!r}")
        nid = self._new_node()
        self.leaf_label[nid] = label
        self.node_of[label] = nid
        return nid

    def connect(self, a: int, b: int, length: float) -> None:
        if b in self.adj[a]:
            raise GuideTreeError("edge already present")
        self.adj[a][b] = length
        self.adj[b][a] = length

    def set_length(self, a: int, b: int, length: float) -> None:
        self.adj[a][b] = length
        self.adj[b][a] = length

    # ---- queries ----

    def leaves(self) -> list:
        return sorted(self.leaf_label.values(), key=repr)

    def n_leaves(self) -> int:
        return len(self.leaf_label)

    def edges(self) -> list[tuple[int, int]]:
        return sorted(
            (a, b) for a in self.adj for b in self.adj[a] if a < b
        )

    def internal_edges(self) -> list[tuple[int, int]]:
        return [
            (a, b)
            for a, b in self.edges()
            if a not in self.leaf_label and b not in self.leaf_label
        ]

    def is_leaf(self, nid: int) -> bool:
        return nid in self.leaf_label

    def cherries(self) -> list[tuple]:
        """Unordered label pairs attached to a shared node.

        A two-leaf tree counts as one cherry even though the leaves are
        attached to each other rather than to an internal node.
        """
        if len(self.leaf_label) == 2:
            a, b = self.leaves()
            return [tuple(sorted((a, b), key=repr))]
        out = set()
        for nid in self.adj:
            if nid in self.leaf_label:
                continue
            attached = sorted(
                (self.leaf_label[n] for n in self.adj[nid] if n in self.leaf_label),
                key=repr,
            )
            for i in range(len(attached)):
                for j in range(i + 1, len(attached)):
                    out.add((attached[i], attached[j]))
        return sorted(out, key=repr)

    def is_cherry(self, a, b) -> bool:
        na, nb = self.node_of.get(a), self.node_of.get(b)
        if na is None or nb is None or na == nb:
            return False
        if nb in self.adj[na]:
            return len(self.leaf_label) == 2
        shared = set(self.adj[na]) & set(self.adj[nb])
        return any(n not in self.leaf_label for n in shared)

    def leaf_distance(self, a, b) -> float:
        """Path length between two leaf labels."""
        start, goal = self.node_of[a], self.node_of[b]
        if start == goal:
            return 0.0
        dist = {start: 0.0}
        stack = [start]
        while stack:
            cur = stack.pop()
            for nxt, length in self.adj[cur].items():
                if nxt in dist:
                    continue
                dist[nxt] = dist[cur] + length
                if nxt == goal:
                    return dist[nxt]
                stack.append(nxt)
        raise GuideTreeError(f"no path between {a!r} and {b!r}")

    # ---- mutation ----

    def copy(self) -> "UnrootedTree":
        out = UnrootedTree()
        out.adj = {n: dict(nb) for n, nb in self.adj.items()}
        out.leaf_label = dict(self.leaf_label)
        out.node_of = dict(self.node_of)
        out._next = self._next
        return out

    def _suppress_if_degree_two(self, nid: int) -> None:
        if nid in self.leaf_label or len(self.adj[nid]) != 2:
            return
        (q, lq), (r, lr) = self.adj[nid].items()
        del self.adj[q][nid]
        del self.adj[r][nid]
        del self.adj[nid]
        self.adj[q][r] = lq + lr
        self.adj[r][q] = lq + lr

    def remove_leaf(self, label) -> None:
        nid = self.node_of.pop(label)
        del self.leaf_label[nid]
        neighbors = list(self.adj[nid])
        for n in neighbors:
            del self.adj[n][nid]
        del self.adj[nid]
        if neighbors:
            self._suppress_if_degree_two(neighbors[0])

    def contract_edge(self, a: int, b: int) -> None:
        """Merge node b into node a (both internal)."""
        if a in self.leaf_label or b in self.leaf_label:
            raise GuideTreeError("cannot contract a pendant edge")
        del self.adj[a][b]
        del self.adj[b][a]
        for w, length in self.adj[b].items():
            del self.adj[w][b]
            self.adj[a][w] = length
            self.adj[w][a] = length
        del self.adj[b]

    def nni(self, a: int, u: int, v: int, b: int) -> None:
        """Swap subtree a (neighbor of u) with subtree b (neighbor of v)."""
        la = self.adj[u].pop(a)
        del self.adj[a][u]
        lb = self.adj[v].pop(b)
        del self.adj[b][v]
        self.adj[v][a] = la
        self.adj[a][v] = la
        self.adj[u][b] = lb
        self.adj[b][u] = lb

    # ---- conversion ----

    def to_rooted(self):
        """Nested-tuple rooted view for the pruning likelihood."""
        if not self.adj:
            raise GuideTreeError("empty tree")
        if len(self.adj) == 1:
            (nid,) = self.adj
            return ("L", self.leaf_label[nid])
        internals = sorted(n for n in self.adj if n not in self.leaf_label)
        if internals:
            root = internals[0]
            kids = tuple(
                (self._subtree(n, root), length)
                for n, length in sorted(self.adj[root].items())
            )
            return ("N", kids)
        # two leaves: split the single edge in the middle
        (a, b) = sorted(self.adj)
        half = self.adj[a][b] / 2.0
        return (
            "N",
            ((("L", self.leaf_label[a]), half), (("L", self.leaf_label[b]), half)),
        )

    def _subtree(self, nid: int, parent: int):
        if nid in self.leaf_label:
            return ("L", self.leaf_label[nid])
        kids = tuple(
            (self._subtree(n, nid), length)
            for n, length in sorted(self.adj[nid].items())
            if n != parent
        )
        return ("N", kids)

    def topology_key(self) -> frozenset:
        """Set of leaf-label splits; equal keys mean equal topologies."""
        all_leaves = frozenset(self.leaf_label.values())
        splits = set()
        for a, b in self.edges():
            side = frozenset(self._leaves_beyond(b, a))
            if 1 < len(side) < len(all_leaves) - 1:
                splits.add(min(side, frozenset(all_leaves - side), key=sorted))
        return frozenset(splits)

    def _leaves_beyond(self, nid: int, parent: int):
        if nid in self.leaf_label:
            return [self.leaf_label[nid]]
        out = []
        for n in self.adj[nid]:
            if n != parent:
                out.extend(self._leaves_beyond(n, nid))
        return out


def star_tree(labels, pendant_length: float = 0.1) -> UnrootedTree:
    """All leaves attached to one hub; every label pair is a cherry."""
    tree = UnrootedTree()
    labels = list(labels)
    if not labels:
        raise GuideTreeError("star tree needs at least one leaf")
    if len(labels) == 1:
        tree.add_leaf_node(labels[0])
        return tree
    if len(labels) == 2:
        a = tree.add_leaf_node(labels[0])
        b = tree.add_leaf_node(labels[1])
        tree.connect(a, b, 2 * pendant_length)
        return tree
    hub = tree._new_node()
    for label in labels:
        tree.connect(tree.add_leaf_node(label), hub, pendant_length)
    return tree


def random_binary_tree(labels, rng: np.random.Generator, mean_length: float) -> UnrootedTree:
    labels = list(labels)
    rng.shuffle(labels)
    tree = UnrootedTree()
    if not labels:
        raise GuideTreeError("need at least one leaf")
    if len(labels) == 1:
        tree.add_leaf_node(labels[0])
        return tree
    if len(labels) == 2:
        a = tree.add_leaf_node(labels[0])
        b = tree.add_leaf_node(labels[1])
        tree.connect(a, b, float(rng.exponential(mean_length)))
        return tree
    hub = tree._new_node()
    for label in labels[:3]:
        tree.connect(tree.add_leaf_node(label), hub, 1.0)
    for label in labels[3:]:
        edges = tree.edges()
        a, b = edges[rng.integers(len(edges))]
        length = tree.adj[a][b]
        del tree.adj[a][b]
        del tree.adj[b][a]
        mid = tree._new_node()
        tree.connect(a, mid, length / 2.0)
        tree.connect(mid, b, length / 2.0)
        tree.connect(tree.add_leaf_node(label), mid, 1.0)
    for a, b in tree.edges():
        tree.set_length(a, b, float(rng.exponential(mean_length)))
    return tree


def collapse_short_branches(
    tree: UnrootedTree, atom_bp: int, threshold_subs: float
) -> UnrootedTree:
    """Contract internal edges with length * atom_bp strictly below the cutoff."""
    out = tree.copy()
    while True:
        doomed = None
        for a, b in out.internal_edges():
            if out.adj[a][b] * atom_bp < threshold_subs:
                doomed = (a, b)
                break
        if doomed is None:
            return out
        out.contract_edge(*doomed)


def log_branch_prior(tree: UnrootedTree, mean: float) -> float:
    total = 0.0
    for a, b in tree.edges():
        length = tree.adj[a][b]
        if length <= 0:
            return float("-inf")
        total += -math.log(mean) - length / mean
    return total


def _log_target(tree, alignment, hky, prior_mean) -> float:
    prior = log_branch_prior(tree, prior_mean)
    if prior == float("-inf"):
        return prior
    return pruning_log_likelihood(tree.to_rooted(), alignment, hky) + prior


def sample_guide_pool(
    alignment: dict,
    hky: HkyParams,
    rng: np.random.Generator,
    iterations: int = 10000,
    burn_in: int = 2500,
    thin: int = 10,
    prior_mean: float = 0.1,
    atom_bp: int = 1,
    collapse_subs: float = 5.0,
) -> list[UnrootedTree]:
    """Thinned posterior sample of guide trees for one atom type.

    Moves alternate between nearest-neighbor interchanges on internal
    edges and multiplier updates of single branch lengths. Collapsing
    happens on the way into the pool, so stored trees may multifurcate.
    """
    labels = sorted(alignment, key=repr)
    if len(labels) == 1:
        return [star_tree(labels)]
    tree = random_binary_tree(labels, rng, prior_mean)
    cur = _log_target(tree, alignment, hky, prior_mean)
    samples: list[UnrootedTree] = []
    half_width = math.log(2.0)
    for it in range(iterations):
        internal = tree.internal_edges()
        do_nni = bool(internal) and rng.random() < 0.5
        if do_nni:
            u, v = internal[rng.integers(len(internal))]
            side_u = [n for n in sorted(tree.adj[u]) if n != v]
            side_v = [n for n in sorted(tree.adj[v]) if n != u]
            a = side_u[rng.integers(len(side_u))]
            b = side_v[rng.integers(len(side_v))]
            tree.nni(a, u, v, b)
            cand = _log_target(tree, alignment, hky, prior_mean)
            if math.log(rng.random()) < cand - cur:
                cur = cand
            else:
                tree.nni(a, v, u, b)  # swap back
        else:
            edges = tree.edges()
            a, b = edges[rng.integers(len(edges))]
            old = tree.adj[a][b]
            factor = math.exp(rng.uniform(-half_width, half_width))
            tree.set_length(a, b, old * factor)
            cand = _log_target(tree, alignment, hky, prior_mean)
            if math.log(rng.random()) < cand - cur + math.log(factor):
                cur = cand
            else:
                tree.set_length(a, b, old)
        if it >= burn_in and (it - burn_in) % thin == 0:
            samples.append(collapse_short_branches(tree, atom_bp, collapse_subs))
    if not samples:
        samples.append(collapse_short_branches(tree, atom_bp, collapse_subs))
    return samples


@dataclass
class GuideTreePool:
    """Per-type lists of sampled guide trees."""

    trees: dict[int, list[UnrootedTree]] = field(default_factory=dict)

    def draw(self, type_id: int, rng: np.random.Generator) -> UnrootedTree:
        pool = self.trees[type_id]
        return pool[rng.integers(len(pool))]

    def draw_all(self, rng: np.random.Generator) -> dict[int, UnrootedTree]:
        return {tid: self.draw(tid, rng) for tid in sorted(self.trees)}


def build_pools(
    type_alignments: dict,
    type_lengths: dict[int, int],
    hky: HkyParams,
    rng: np.random.Generator,
    iterations: int = 10000,
    burn_in: int = 2500,
    thin: int = 10,
    prior_mean: float = 0.1,
    collapse_subs: float = 5.0,
) -> GuideTreePool:
    pool = GuideTreePool()
    for tid in sorted(type_alignments):
        pool.trees[tid] = sample_guide_pool(
            type_alignments[tid],
            hky,
            rng,
            iterations=iterations,
            burn_in=burn_in,
            thin=thin,
            prior_mean=prior_mean,
            atom_bp=type_lengths[tid],
            collapse_subs=collapse_subs,
        )
    return pool


# ---- pool file IO ----

POOLS_MAGIC = "# duphist pools v1"


def _label_str(label) -> str:
    species, idx = label
    if "|" in species:
        raise GuideTreeError(f"species name {species!r} may not contain '|'")
    return f"{species}|{idx}"


def _label_val(text: str):
    species, _, idx = text.rpartition("|")
    if not species:
        raise GuideTreeError(f"bad leaf label {text!r}")
    return (species, int(idx))


def _tree_to_clade(tree: UnrootedTree) -> Clade:
    def convert(sub, length):
        if sub[0] == "L":
            return Clade(name=_label_str(sub[1]), length=length)
        return Clade(
            name="",
            length=length,
            children=[convert(child, clen) for child, clen in sub[1]],
        )

    return convert(tree.to_rooted(), None)


def _clade_to_tree(clade: Clade) -> UnrootedTree:
    tree = UnrootedTree()

    def convert(node: Clade) -> int:
        if not node.children:
            if not node.name:
                raise GuideTreeError("unlabeled leaf in pool tree")
            return tree.add_leaf_node(_label_val(node.name))
        nid = tree._new_node()
        for child in node.children:
            if child.length is None or child.length < 0:
                raise GuideTreeError("pool tree edge lacks a length")
            tree.connect(nid, convert(child), child.length)
        return nid

    root = convert(clade)
    tree._suppress_if_degree_two(root)
    return tree


def write_pools(path: str, pool: GuideTreePool) -> None:
    with open(path, "w") as fh:
        fh.write(POOLS_MAGIC + "\n")
        for tid in sorted(pool.trees):
            trees = pool.trees[tid]
            fh.write(f"# type {tid} trees={len(trees)}\n")
            for tree in trees:
                fh.write(write_newick(_tree_to_clade(tree)) + "\n")


def read_pools(path: str) -> GuideTreePool:
    pool = GuideTreePool()
    current: int | None = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("# type "):
                parts = line.split()
                current = int(parts[2])
                pool.trees.setdefault(current, [])
                continue
            if line.startswith("#"):
                continue
            if current is None:
                raise GuideTreeError(f"{path}:{lineno}: tree before any type header")
            pool.trees[current].append(_clade_to_tree(parse_newick(line)))
    return pool
