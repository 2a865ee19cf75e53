"""Backward proposal walks over atomic sequences.

A walk starts from the extant sequences and repeatedly unwinds one event
(a duplication, possibly with one coupled deletion, or a speciation
merge) until a single sequence of pairwise-distinct atom types remains.
Replaying the chosen steps forward yields a candidate history; the walk
probability is the product of per-step softmax choices over feature-scored
candidates, so the exact proposal density is available to the sampler.

Working guide trees steer the walk: matched atoms must form cherries in
their type's tree, and tree distances feed the feature scores.  Trees are
consumed as mutable copies; unwinding removes the leaves that correspond
to merged-away atom instances.

Everything here must be a pure function of the visible walk state so that
re-running a walk (for the reverse proposal density) gives bit-identical
probabilities; caches are keyed on exactly what they read.
"""

from __future__ import annotations

import itertools
import math
import weakref
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .atoms import AtomInstance, AtomTable
from .config import DEFAULT_WEIGHTS
from .events import Deletion, Duplication
from .guidetrees import GuideTreePool, UnrootedTree
from .history import History
from .species_tree import SpeciesTree

FEATURE_NAMES = (
    "log_removed_bp",
    "seen_before",
    "cherry_distance_mean",
    "cherry_distance_var",
    "inside_larger",
    "uncollapsible_junctions",
    "adjacency_reduction",
    "coupled_deletion",
    "log_deletion_share",
    "speciation_deletions",
)

_SPEC_PATH_CAP = 40
_SPEC_KEEP = 20
_SPEC_SLACK_NUM = 9  # keep tracebacks scoring >= 9/10 of the optimum
_SPEC_SLACK_DEN = 10

_DUP_CACHE_CAP = 1024
_SPEC_CACHE_CAP = 8192


class ProposalError(RuntimeError):
    """The walk cannot continue; carries a state dump for debugging."""


class _Lru:
    """Bounded mapping that evicts the least recently used entry."""

    __slots__ = ("cap", "data")

    def __init__(self, cap: int):
        self.cap = cap
        self.data: OrderedDict = OrderedDict()

    def get(self, key):
        got = self.data.get(key)
        if got is not None:
            self.data.move_to_end(key)
        return got

    def put(self, key, value) -> None:
        data = self.data
        data[key] = value
        data.move_to_end(key)
        if len(data) > self.cap:
            data.popitem(last=False)


@dataclass
class ProposalCaches:
    """Enumeration caches that stay valid across walks.

    Entries are keyed on everything they read (atom types and strands,
    token labels, the cherry pattern, working-tree identity), never on a
    particular walk's atom ids, so one instance can be shared by every
    walk and replay over the same cluster.  Features that read global
    walk state (the reference history, adjacency and type counts) are
    refreshed on each cache hit.
    """

    dup: _Lru = field(default_factory=lambda: _Lru(_DUP_CACHE_CAP))
    spec: _Lru = field(default_factory=lambda: _Lru(_SPEC_CACHE_CAP))


_TREE_TOKENS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_tree_token_counter = itertools.count(1)


def _tree_token(tree) -> int:
    """Stable process-wide identity token for a working-tree object.

    Tokens are never reused while the tree is alive, so equal tokens
    imply the exact same tree content; dying trees release theirs.
    """
    tok = _TREE_TOKENS.get(tree)
    if tok is None:
        tok = next(_tree_token_counter)
        _TREE_TOKENS[tree] = tok
    return tok


class Candidate:
    """One unwindable event with its features and proposal weight."""

    __slots__ = (
        "kind", "ident", "node", "features", "score", "payload", "delta",
        "tdelta", "probes",
    )

    def __init__(self, kind, ident, node, features, score, payload=(),
                 delta=None, tdelta=None, probes=()):
        self.kind = kind
        self.ident = ident
        self.node = node
        self.features = features
        self.score = score
        self.payload = payload
        self.delta = delta
        self.tdelta = tdelta
        self.probes = probes

    @property
    def weight(self) -> float:
        return math.exp(self.score)

    def __repr__(self):
        return f"Candidate({self.ident}, score={self.score:.3f})"


@dataclass
class ProposalState:
    """Mutable walk state over the active lineages."""

    species_tree: SpeciesTree
    type_lengths: dict[int, int]
    sequences: dict[str, list[AtomInstance]]
    guide_trees: dict[int, UnrootedTree]
    prev_history_events: frozenset
    unwound: list
    token: dict[int, tuple]
    sig: dict[int, int]
    adj: Counter
    type_count: Counter
    weights: tuple
    next_id: int
    dist_cache: dict
    caches: ProposalCaches
    tree_sig: dict[int, int]
    tree_version: dict[int, int] = field(default_factory=dict)
    cherry_cache: dict = field(default_factory=dict)
    prev_index: dict = field(default_factory=dict)
    branch_steps: dict = field(default_factory=dict)
    spec_deletions: dict = field(default_factory=dict)
    keys: list = field(default_factory=list)

    def active_nodes(self) -> list[str]:
        return sorted(self.sequences)

    def finished(self) -> bool:
        if len(self.sequences) != 1:
            return False
        return all(c <= 1 for c in self.type_count.values())


def _adj_key(a: AtomInstance, b: AtomInstance) -> tuple:
    """Strand-normalized adjacency of two atoms, as a flat 4-tuple.

    Reading the pair on the other strand gives (b.type, -b.strand,
    a.type, -a.strand); the lexicographically smaller reading is the key.
    """
    ta = a.type_id
    tb = b.type_id
    sa = a.strand
    sb = b.strand
    if tb < ta:
        return (tb, -sb, ta, -sa)
    if ta < tb:
        return (ta, sa, tb, sb)
    nsb = -sb
    if nsb < sa:
        return (tb, nsb, ta, -sa)
    return (ta, sa, tb, sb)


def _seq_adjacencies(seq: list[AtomInstance]) -> list[tuple]:
    return [_adj_key(a, b) for a, b in zip(seq, seq[1:])]


def build_state(
    table: AtomTable,
    species_tree: SpeciesTree,
    guide_trees: dict[int, UnrootedTree],
    prev_keys: frozenset = frozenset(),
    weights: tuple = DEFAULT_WEIGHTS,
    dist_cache: dict | None = None,
    caches: ProposalCaches | None = None,
) -> ProposalState:
    """Set up a walk from extant data; guide trees are copied."""
    sequences: dict[str, list[AtomInstance]] = {}
    token: dict[int, tuple] = {}
    sig: dict[int, int] = {}
    adj: Counter = Counter()
    type_count: Counter = Counter()
    bit = 0
    max_id = 0
    for leaf in species_tree.leaf_names():
        atoms = list(table.sequences[leaf].atoms) if leaf in table.sequences else []
        sequences[leaf] = atoms
        for idx, atom in enumerate(atoms):
            token[atom.id] = (leaf, idx)
            sig[atom.id] = 1 << bit
            bit += 1
            if atom.id > max_id:
                max_id = atom.id
            type_count[atom.type_id] += 1
        adj.update(_seq_adjacencies(atoms))
    if bit == 0:
        raise ProposalError("no extant atoms to unwind")
    for name in species_tree.nodes:
        node = species_tree.nodes[name]
        kids = len(node.children)
        if kids > 2 or (kids == 1 and node.parent is not None):
            raise ProposalError(
                f"species tree node {name!r} has {kids} children; "
                "the walk needs a binary tree (a bare root stem is fine)"
            )
    trees = {}
    tree_sig = {}
    for tid, count in type_count.items():
        if count and tid not in guide_trees:
            raise ProposalError(f"no guide tree for type {tid}")
        tree_sig[tid] = _tree_token(guide_trees[tid])
        trees[tid] = guide_trees[tid].copy()
    prev_index: dict = {}
    for key in prev_keys:
        first = key[3][0] if key[0] == "dd" else key[2][0]
        prev_index.setdefault((key[0], first), set()).add(key)
    return ProposalState(
        species_tree=species_tree,
        type_lengths=dict(table.type_lengths),
        sequences=sequences,
        guide_trees=trees,
        prev_history_events=prev_keys,
        unwound=[],
        token=token,
        sig=sig,
        adj=adj,
        type_count=type_count,
        weights=tuple(weights),
        next_id=max_id + 1,
        dist_cache={} if dist_cache is None else dist_cache,
        caches=caches if caches is not None else ProposalCaches(),
        tree_sig=tree_sig,
        prev_index=prev_index,
    )


# ---------------------------------------------------------------------------
# Tree-derived helpers with caching.
# ---------------------------------------------------------------------------


def _cherries(state: ProposalState, tid: int) -> set:
    version = state.tree_version.get(tid, 0)
    hit = state.cherry_cache.get(tid)
    if hit is not None and hit[0] == version:
        return hit[1]
    pairs = {frozenset(pair) for pair in state.guide_trees[tid].cherries()}
    state.cherry_cache[tid] = (version, pairs)
    return pairs


def _distance(state: ProposalState, tid: int, la, lb) -> float:
    if la > lb:
        la, lb = lb, la
    per_type = state.dist_cache.setdefault(tid, {})
    got = per_type.get((la, lb))
    if got is None:
        got = state.guide_trees[tid].leaf_distance(la, lb)
        per_type[(la, lb)] = got
    return got


def _remove_leaf(state: ProposalState, tid: int, label) -> None:
    state.guide_trees[tid].remove_leaf(label)
    state.tree_version[tid] = state.tree_version.get(tid, 0) + 1


def _cherry_ok(state, a: AtomInstance, b: AtomInstance) -> bool:
    pair = frozenset((state.token[a.id], state.token[b.id]))
    if len(pair) < 2:
        return False
    return pair in _cherries(state, a.type_id)


# ---------------------------------------------------------------------------
# Feature machinery shared by duplication candidates.
# ---------------------------------------------------------------------------


def _removal_delta(seq, r0, r1, restore_at=None, restored=None):
    """Adjacency count changes for removing [r0, r1) (plus a restoration).

    ``restore_at`` is a pre-removal index strictly outside [r0, r1);
    ``restored`` atoms are spliced in before it.
    """
    delta: dict = {}
    n = len(seq)
    get = delta.get
    for k in range(max(r0 - 1, 0), min(r1, n - 1)):
        key = _adj_key(seq[k], seq[k + 1])
        delta[key] = get(key, 0) - 1
    if r0 > 0 and r1 < n:
        key = _adj_key(seq[r0 - 1], seq[r1])
        delta[key] = get(key, 0) + 1
    if restore_at is not None and restored:
        key = _adj_key(seq[restore_at - 1], seq[restore_at])
        delta[key] = get(key, 0) - 1
        chain = [seq[restore_at - 1], *restored, seq[restore_at]]
        for a, b in zip(chain, chain[1:]):
            key = _adj_key(a, b)
            delta[key] = get(key, 0) + 1
    return delta


def _pi_reduction(adj: Counter, delta: dict) -> int:
    drop = 0
    for key, d in delta.items():
        if d == 0:
            continue
        before = adj[key]
        drop += (1 if before > 0 else 0) - (1 if before + d > 0 else 0)
    return drop


def _post_junctions(seq, r0, r1, s0, s1):
    """Post-removal junction probes: the heal plus the source's flanks.

    Returns deduplicated (left_atom, right_atom) pairs; the source span
    [s0, s1) survives while [r0, r1) is removed.
    """
    n = len(seq)
    probes = []
    seen = set()

    def push(li, ri):
        if li is None or ri is None or (li, ri) in seen:
            return
        seen.add((li, ri))
        probes.append((seq[li], seq[ri]))

    push(r0 - 1 if r0 > 0 else None, r1 if r1 < n else None)
    li = s0 - 1
    if r0 <= li < r1:
        li = r0 - 1
    push(li if li >= 0 else None, s0)
    ri = s1
    if r0 <= ri < r1:
        ri = r1
    push(s1 - 1, ri if ri < n else None)
    return probes


def _junction_failures(state, probes, delta, type_delta):
    adj = state.adj
    type_count = state.type_count
    dget = delta.get
    tget = type_delta.get
    failures = 0
    for a, b in probes:
        key = _adj_key(a, b)
        post = adj[key] + dget(key, 0)
        if post >= 2:
            continue
        if a.type_id != b.type_id and post >= 1:
            occ_a = type_count[a.type_id] + tget(a.type_id, 0)
            occ_b = type_count[b.type_id] + tget(b.type_id, 0)
            if post == occ_a == occ_b:
                continue
        failures += 1
    return failures


def _pair_distance_stats(state, seq, pairs):
    """bp-weighted mean and variance of cherry distances over match pairs."""
    lengths = state.type_lengths
    token = state.token
    if len(pairs) == 1:
        i, j = pairs[0]
        a = seq[i]
        return _distance(state, a.type_id, token[a.id], token[seq[j].id]), 0.0
    total = 0.0
    acc = 0.0
    acc2 = 0.0
    for i, j in pairs:
        a = seq[i]
        bp = lengths[a.type_id]
        d = _distance(state, a.type_id, token[a.id], token[seq[j].id])
        total += bp
        acc += bp * d
        acc2 += bp * d * d
    if total <= 0:
        return 0.0, 0.0
    mean = acc / total
    return mean, max(acc2 / total - mean * mean, 0.0)


def _bp_prefix(state, seq):
    lengths = state.type_lengths
    pref = [0] * (len(seq) + 1)
    acc = 0
    for i, atom in enumerate(seq):
        acc += lengths[atom.type_id]
        pref[i + 1] = acc
    return pref


class _IncRemoval:
    """Removal span [r0, r1) whose junction bookkeeping grows in O(1).

    Tracks the same delta dict as ``_removal_delta`` plus the resulting
    adjacency-count reduction and per-type occupancy changes, updating
    all three as the span absorbs one more atom to the right or left.
    """

    __slots__ = ("seq", "n", "adj", "delta", "tdelta", "drop", "r0", "r1")

    def __init__(self, state, seq, r0, r1):
        self.seq = seq
        self.n = len(seq)
        self.adj = state.adj
        self.delta = {}
        self.tdelta = {}
        self.drop = 0
        self.r0 = r0
        self.r1 = r1
        for k in range(max(r0 - 1, 0), min(r1, self.n - 1)):
            self._bump(_adj_key(seq[k], seq[k + 1]), -1)
        if r0 > 0 and r1 < self.n:
            self._bump(_adj_key(seq[r0 - 1], seq[r1]), 1)
        td = self.tdelta
        for k in range(r0, r1):
            t = seq[k].type_id
            td[t] = td.get(t, 0) - 1

    def _bump(self, key, dd):
        delta = self.delta
        old = delta.get(key, 0)
        new = old + dd
        if new:
            delta[key] = new
        else:
            delta.pop(key, None)
        base = self.adj[key]
        self.drop += (1 if base + old > 0 else 0) - (1 if base + new > 0 else 0)

    def grow_right(self):
        seq = self.seq
        n = self.n
        r0 = self.r0
        r1 = self.r1
        if r0 > 0 and r1 < n:
            self._bump(_adj_key(seq[r0 - 1], seq[r1]), -1)
        if r1 <= n - 2:
            self._bump(_adj_key(seq[r1], seq[r1 + 1]), -1)
        t = seq[r1].type_id
        self.tdelta[t] = self.tdelta.get(t, 0) - 1
        r1 += 1
        self.r1 = r1
        if r0 > 0 and r1 < n:
            self._bump(_adj_key(seq[r0 - 1], seq[r1]), 1)

    def grow_left(self):
        seq = self.seq
        n = self.n
        r0 = self.r0
        r1 = self.r1
        if r0 > 0 and r1 < n:
            self._bump(_adj_key(seq[r0 - 1], seq[r1]), -1)
        if r0 >= 2:
            self._bump(_adj_key(seq[r0 - 2], seq[r0 - 1]), -1)
        t = seq[r0 - 1].type_id
        self.tdelta[t] = self.tdelta.get(t, 0) - 1
        r0 -= 1
        self.r0 = r0
        if r0 > 0 and r1 < n:
            self._bump(_adj_key(seq[r0 - 1], seq[r1]), 1)

    def failures_and_probes(self, state, s0, s1):
        """Post-removal probe triples and how many stay ambiguous.

        The probes are the healed junction and the flanks of the source
        run [s0, s1); returns (failure_count, ((key, ta, tb), ...)).
        """
        seq = self.seq
        n = self.n
        r0 = self.r0
        r1 = self.r1
        index_pairs = []
        if r0 > 0 and r1 < n:
            index_pairs.append((r0 - 1, r1))
        li = s0 - 1
        if r0 <= li < r1:
            li = r0 - 1
        if li >= 0 and (li, s0) not in index_pairs:
            index_pairs.append((li, s0))
        ri = s1
        if r0 <= ri < r1:
            ri = r1
        if ri < n and (s1 - 1, ri) not in index_pairs:
            index_pairs.append((s1 - 1, ri))
        adj = self.adj
        delta = self.delta
        tc = state.type_count
        td = self.tdelta
        fails = 0
        probes = []
        for li, ri in index_pairs:
            a = seq[li]
            b = seq[ri]
            key = _adj_key(a, b)
            ta = a.type_id
            tb = b.type_id
            probes.append((key, ta, tb))
            post = adj[key] + delta.get(key, 0)
            if post >= 2:
                continue
            if ta != tb and post >= 1:
                if post == tc[ta] + td.get(ta, 0) == tc[tb] + td.get(tb, 0):
                    continue
            fails += 1
        return fails, tuple(probes)


# ---------------------------------------------------------------------------
# Duplication enumeration.
# ---------------------------------------------------------------------------


def enumerate_duplications(state: ProposalState) -> list[Candidate]:
    out: list[Candidate] = []
    token = state.token
    tree_sig = state.tree_sig
    for node in state.active_nodes():
        seq = state.sequences[node]
        n = len(seq)
        if n < 2:
            continue
        positions: dict[int, list[int]] = {}
        for idx, atom in enumerate(seq):
            positions.setdefault(atom.type_id, []).append(idx)
        multi = [tid for tid in sorted(positions) if len(positions[tid]) >= 2]
        cache_key = (
            node,
            tuple((a.type_id, a.strand) for a in seq),
            # record geometry reads tokens only through same-type pair
            # distances, so single-copy tokens cannot matter
            tuple(token[seq[i].id] for tid in multi for i in positions[tid]),
            _node_match_bits(state, seq, positions),
            tuple(tree_sig[tid] for tid in multi),
        )
        records = state.caches.dup.get(cache_key)
        if records is not None:
            _rescore_dup_records(state, seq, records)
        else:
            records = _build_dup_records(state, node, seq, positions)
            state.caches.dup.put(cache_key, records)
        out.extend(records)
    return out


def _node_match_bits(state, seq, positions) -> tuple:
    """Cherry pattern over the node's own same-type atom pairs.

    Candidate geometry inside one node depends on the guide trees only
    through these booleans, so they make an exact cache stamp.
    """
    token = state.token
    bits = []
    for tid in sorted(positions):
        pos = positions[tid]
        k = len(pos)
        if k < 2:
            continue
        cherries = _cherries(state, tid)
        mask = 0
        bit = 1
        for ii in range(k - 1):
            la = token[seq[pos[ii]].id]
            for jj in range(ii + 1, k):
                if frozenset((la, token[seq[pos[jj]].id])) in cherries:
                    mask |= bit
                bit <<= 1
        bits.append(mask)
    return tuple(bits)


def _build_dup_records(state, node, seq, positions) -> list[Candidate]:
    out: list[Candidate] = []
    pref = _bp_prefix(state, seq)
    for tid in sorted(positions):
        pos = positions[tid]
        if len(pos) < 2:
            continue
        for ii in range(len(pos) - 1):
            p = pos[ii]
            for jj in range(ii + 1, len(pos)):
                q = pos[jj]
                if seq[p].strand == seq[q].strand:
                    _direct_from_pair(state, node, seq, pref, p, q, out)
                else:
                    _inverted_from_pair(state, node, seq, pref, p, q, out)
    _mark_inside_larger(state, out)
    return out


def _rescore_dup_records(state, seq, records) -> None:
    """Refresh the globally-coupled features (f2, f6, f7) of cached records.

    Everything else in a record is a pure function of the node's own
    sequence and guide trees, both unchanged while the cache key holds;
    f2 reads the reference history and the walk's merge partition, f6 and
    f7 read the global adjacency and type counts, so all three are
    recomputed against the state at hand.
    """
    adj = state.adj
    tc = state.type_count
    weights = state.weights
    w2 = weights[1]
    w6 = weights[5]
    w7 = weights[6]
    for cand in records:
        delta = cand.delta
        drop = 0
        for key, d in delta.items():
            base = adj[key]
            drop += (1 if base > 0 else 0) - (1 if base + d > 0 else 0)
        td = cand.tdelta
        fails = 0
        for key, ta, tb in cand.probes:
            post = adj[key] + delta.get(key, 0)
            if post >= 2:
                continue
            if ta != tb and post >= 1:
                if post == tc[ta] + td.get(ta, 0) == tc[tb] + td.get(tb, 0):
                    continue
            fails += 1
        ident = cand.ident
        if ident[0] == "d":
            _, _, p, q, L, inverted, remove_right = ident
            f2 = _f2_base(state, seq, p, q, L, inverted, remove_right)
        else:
            _, _, f_span, _ssp, _chk, inverted, interp = ident
            f2 = _f2_coupled(
                state, seq, cand.payload[3], inverted, interp,
                f_span[0], f_span[1],
            )
        f = cand.features
        f6 = float(fails)
        f7 = float(drop)
        if f2 != f[1] or f6 != f[5] or f7 != f[6]:
            cand.score += (
                w2 * (f2 - f[1]) + w6 * (f6 - f[5]) + w7 * (f7 - f[6])
            )
            cand.features = (f[0], f2) + f[2:5] + (f6, f7) + f[7:]


def _direct_match_len(state, seq, p, q, limit):
    """Maximal k with seq[p..p+k) matching seq[q..q+k) directly."""
    n = len(seq)
    k = 0
    while k < limit and q + k < n:
        a, b = seq[p + k], seq[q + k]
        if a.type_id != b.type_id or a.strand != b.strand:
            break
        if not _cherry_ok(state, a, b):
            break
        k += 1
    return k


def _inverted_match_len(state, seq, p, q, limit):
    """Maximal k with seq[p+t] matching seq[q-t] invertedly for t < k."""
    k = 0
    while k < limit and q - k >= 0:
        a, b = seq[p + k], seq[q - k]
        if a.type_id != b.type_id or a.strand != -b.strand:
            break
        if not _cherry_ok(state, a, b):
            break
        k += 1
    return k


def _direct_from_pair(state, node, seq, pref, p, q, out):
    n = len(seq)
    m = _direct_match_len(state, seq, p, q, q - p)
    if m == 0:
        return
    token = state.token
    lengths = state.type_lengths
    total = acc = acc2 = 0.0
    incR = incL = None
    for L in range(1, m + 1):
        a = seq[p + L - 1]
        b = seq[q + L - 1]
        bp = lengths[a.type_id]
        d = _distance(state, a.type_id, token[a.id], token[b.id])
        total += bp
        acc += bp * d
        acc2 += bp * d * d
        mean = acc / total
        var = acc2 / total - mean * mean
        if var < 0.0:
            var = 0.0
        if incR is None:
            incR = _IncRemoval(state, seq, q, q + 1)
            incL = _IncRemoval(state, seq, p, p + 1)
        else:
            incR.grow_right()
            incL.grow_right()
        f1 = math.log(max(pref[q + L] - pref[q], 1))
        _emit_base_inc(state, node, seq, out, p, q, L, False, True, incR, f1, mean, var)
        _emit_base_inc(state, node, seq, out, p, q, L, False, False, incL, f1, mean, var)
    # coupled variants: maximal prefix, one internal gap, maximal suffix
    if m >= 1:
        a = m
        # gap on the q-side run (q run is the full one)
        for g in range(1, n - q - a):
            if q + a + g >= n:
                break
            x, y = seq[p + a], seq[q + a + g]
            if x.type_id != y.type_id or x.strand != y.strand:
                continue
            b = _direct_match_len(state, seq, p + a, q + a + g, q - p - a)
            if b >= 1:
                _emit_coupled_direct(state, node, seq, pref, q, p, a, g, b, out)
        # gap on the p-side run (p run is the full one)
        for g in range(1, q - p - a):
            if q + a >= n:
                break
            x, y = seq[p + a + g], seq[q + a]
            if x.type_id != y.type_id or x.strand != y.strand:
                continue
            b = _direct_match_len(state, seq, p + a + g, q + a, q - p - a - g)
            if b >= 1:
                _emit_coupled_direct(state, node, seq, pref, p, q, a, g, b, out)


def _inverted_from_pair(state, node, seq, pref, p, q, out):
    m = _inverted_match_len(state, seq, p, q, (q - p + 1) // 2)
    if m == 0:
        return
    token = state.token
    lengths = state.type_lengths
    total = acc = acc2 = 0.0
    incR = incL = None
    for L in range(1, m + 1):
        a = seq[p + L - 1]
        b = seq[q - L + 1]
        bp = lengths[a.type_id]
        d = _distance(state, a.type_id, token[a.id], token[b.id])
        total += bp
        acc += bp * d
        acc2 += bp * d * d
        mean = acc / total
        var = acc2 / total - mean * mean
        if var < 0.0:
            var = 0.0
        if incR is None:
            incR = _IncRemoval(state, seq, q, q + 1)
            incL = _IncRemoval(state, seq, p, p + 1)
        else:
            incR.grow_left()
            incL.grow_right()
        f1 = math.log(max(pref[p + L] - pref[p], 1))
        _emit_base_inc(state, node, seq, out, p, q, L, True, True, incR, f1, mean, var)
        _emit_base_inc(state, node, seq, out, p, q, L, True, False, incL, f1, mean, var)
    if m >= 1:
        a = m
        # gap on the p-side run (ascending side is the full one)
        for g in range(1, q - p - 2 * a + 1):
            if p + a + g > q - a:
                break
            x, y = seq[p + a + g], seq[q - a]
            if x.type_id != y.type_id or x.strand != -y.strand:
                continue
            limit = ((q - a) - (p + a + g) + 1) // 2
            b = _inverted_match_len(state, seq, p + a + g, q - a, limit)
            if b >= 1:
                _emit_coupled_inverted(state, node, seq, pref, p, q, a, g, b, True, out)
        # gap on the q-side run (descending side is the full one)
        for g in range(1, q - p - 2 * a + 1):
            if p + a > q - a - g:
                break
            x, y = seq[p + a], seq[q - a - g]
            if x.type_id != y.type_id or x.strand != -y.strand:
                continue
            limit = ((q - a - g) - (p + a) + 1) // 2
            b = _inverted_match_len(state, seq, p + a, q - a - g, limit)
            if b >= 1:
                _emit_coupled_inverted(state, node, seq, pref, p, q, a, g, b, False, out)


def _base_pairs(p, q, L, inverted, remove_right):
    """(source_pos, copy_pos) index pairs in source reading order."""
    if not inverted:
        if remove_right:
            return [(p + k, q + k) for k in range(L)]
        return [(q + k, p + k) for k in range(L)]
    if remove_right:
        return [(p + k, q - k) for k in range(L)]
    return [(q - L + 1 + k, p + L - 1 - k) for k in range(L)]


def _emit_base_inc(state, node, seq, out, p, q, L, inverted, remove_right,
                   inc, f1, f3, f4):
    weights = state.weights
    if inverted:
        s0, s1 = (p, p + L) if remove_right else (q - L + 1, q + 1)
    else:
        s0, s1 = (p, p + L) if remove_right else (q, q + L)
    fails, probes = inc.failures_and_probes(state, s0, s1)
    f6 = float(fails)
    f7 = float(inc.drop)
    f2 = _f2_base(state, seq, p, q, L, inverted, remove_right)
    score = (
        weights[0] * f1
        + weights[1] * f2
        + weights[2] * f3
        + weights[3] * f4
        + weights[5] * f6
        + weights[6] * f7
    )
    out.append(
        Candidate(
            kind="dup",
            ident=("d", node, p, q, L, inverted, remove_right),
            node=node,
            features=(f1, f2, f3, f4, 0.0, f6, f7, 0.0, 0.0, 0.0),
            score=score,
            payload=(inc.r0, inc.r1, s0, s1),
            delta=dict(inc.delta),
            tdelta=dict(inc.tdelta),
            probes=probes,
        )
    )


class _Stub:
    __slots__ = ("type_id", "strand")

    def __init__(self, type_id, strand):
        self.type_id = type_id
        self.strand = strand


def _as_stubs(restored):
    return [_Stub(t, s) for t, s in restored]


def _coupled_features(state, node, seq, pref, f_span, s_span, chunk, pairs,
                      restored, restore_at, rho, inverted, interp, out):
    """Assemble features and payload for one coupled candidate.

    ``f_span`` holds the full run, ``s_span`` the short one, ``chunk`` the
    unmatched stretch inside the full run (absolute indices).  ``restored``
    lists (type, strand) atoms spliced at pre-removal index ``restore_at``
    when the deletion sits in the source; ``rho`` is the chunk's offset
    inside the full-length copy frame.
    """
    weights = state.weights
    f0, f1_ = f_span
    s0, s1 = s_span
    if interp == "copy":
        r0, r1 = s0, s1
        delta = _removal_delta(seq, r0, r1)
        removed_bp = pref[s1] - pref[s0]
        probes = _post_junctions(seq, r0, r1, f0, f1_)
    else:
        r0, r1 = f0, f1_
        delta = _removal_delta(seq, r0, r1, restore_at, _as_stubs(restored))
        removed_bp = (pref[f1_] - pref[f0]) - (pref[chunk[1]] - pref[chunk[0]])
        probes = _post_junctions(seq, r0, r1, s0, s1)
    type_delta: dict = {}
    for k in range(r0, r1):
        t = seq[k].type_id
        type_delta[t] = type_delta.get(t, 0) - 1
    if interp != "copy":
        for t, _s in restored:
            type_delta[t] = type_delta.get(t, 0) + 1
    chunk_bp = pref[chunk[1]] - pref[chunk[0]]
    full_bp = pref[f1_] - pref[f0]
    f1v = math.log(max(removed_bp, 1))
    f3, f4 = _pair_distance_stats(state, seq, pairs)
    f6 = float(_junction_failures(state, probes, delta, type_delta))
    f7 = float(_pi_reduction(state.adj, delta))
    f9 = math.log(chunk_bp / (chunk_bp + full_bp))
    f2 = _f2_coupled(state, seq, pairs, inverted, interp, f0, f1_)
    score = (
        weights[0] * f1v
        + weights[1] * f2
        + weights[2] * f3
        + weights[3] * f4
        + weights[5] * f6
        + weights[6] * f7
        + weights[7]
        + weights[8] * f9
    )
    out.append(
        Candidate(
            kind="dup",
            ident=("dd", node, f_span, s_span, chunk, inverted, interp),
            node=node,
            features=(f1v, f2, f3, f4, 0.0, f6, f7, 1.0, f9, 0.0),
            score=score,
            payload=(f_span, s_span, chunk, tuple(pairs), tuple(restored),
                     restore_at, rho),
            delta=delta,
            tdelta=type_delta,
            probes=tuple(
                (_adj_key(a, b), a.type_id, b.type_id) for a, b in probes
            ),
        )
    )


def _emit_coupled_direct(state, node, seq, pref, f_base, s_base, a, g, b, out):
    """Direct coupled pair: full run at f_base, short run at s_base."""
    Lf = a + g + b
    f_span = (f_base, f_base + Lf)
    s_span = (s_base, s_base + a + b)
    if not (f_span[1] <= s_span[0] or s_span[1] <= f_span[0]):
        return
    chunk = (f_base + a, f_base + a + g)
    pairs_fs = [(f_base + k, s_base + k) for k in range(a)] + [
        (f_base + a + g + t, s_base + a + t) for t in range(b)
    ]
    rho = (a, a + g)
    # deletion in the copy: the short run is the copy, remove it
    _coupled_features(
        state, node, seq, pref, f_span, s_span, chunk,
        pairs_fs, (), None, rho, False, "copy", out,
    )
    # deletion in the source: the full run is the copy; remove it and
    # splice the chunk back into the source
    restored = [(seq[k].type_id, seq[k].strand) for k in range(chunk[0], chunk[1])]
    restore_at = s_base + a
    _coupled_features(
        state, node, seq, pref, f_span, s_span, chunk,
        [(s, f) for f, s in pairs_fs], restored, restore_at, rho, False,
        "source", out,
    )


def _emit_coupled_inverted(state, node, seq, pref, p, q, a, g, b, gap_on_p, out):
    """Inverted coupled pair anchored at (p, q)."""
    Lf = a + g + b
    if gap_on_p:
        f_span = (p, p + Lf)
        s_span = (q - a - b + 1, q + 1)
        chunk = (p + a, p + a + g)
        pairs_fs = [(p + k, q - k) for k in range(a)] + [
            (p + a + g + t, q - a - t) for t in range(b)
        ]
        rho = (b, b + g)
        restore_at = s_span[0] + b
    else:
        f_span = (q - Lf + 1, q + 1)
        s_span = (p, p + a + b)
        chunk = (q - a - g + 1, q - a + 1)
        pairs_fs = [(q - k, p + k) for k in range(a)] + [
            (q - a - g - t, p + a + t) for t in range(b)
        ]
        rho = (a, a + g)
        restore_at = s_span[0] + a
    if not (f_span[1] <= s_span[0] or s_span[1] <= f_span[0]):
        return
    restored = [
        (seq[k].type_id, -seq[k].strand)
        for k in range(chunk[1] - 1, chunk[0] - 1, -1)
    ]
    _coupled_features(
        state, node, seq, pref, f_span, s_span, chunk,
        pairs_fs, (), None, rho, True, "copy", out,
    )
    _coupled_features(
        state, node, seq, pref, f_span, s_span, chunk,
        [(s, f) for f, s in pairs_fs], restored, restore_at, rho, True,
        "source", out,
    )


def _mark_inside_larger(state, out):
    """Set the inside-a-larger-duplication flag on plain run pairs."""
    groups: dict = {}
    for cand in out:
        ident = cand.ident
        if ident[0] != "d":
            continue
        _, node, p, q, L, inverted, _rr = ident
        diag = (q - p) if not inverted else (p + q)
        groups.setdefault((node, inverted, diag), []).append((p, L, cand))
    w5 = state.weights[4]
    for group in groups.values():
        if len(group) < 2:
            continue
        spans = [(p, p + L) for p, L, _ in group]
        for p, L, cand in group:
            end = p + L
            for o0, o1 in spans:
                if o0 <= p and end <= o1 and o1 - o0 > L:
                    f = cand.features
                    cand.features = f[:4] + (1.0,) + f[5:]
                    cand.score += w5
                    break


# ---------------------------------------------------------------------------
# f2: was this event part of the reference history?
# ---------------------------------------------------------------------------


def _dup_key(state, tag, inverted, seq, pairs, extra):
    sig = state.sig
    if tag == "d":
        body = tuple((sig[seq[i].id], sig[seq[j].id]) for i, j in pairs)
        return ("d", inverted, body)
    interp, f0, f1_ = extra
    if interp == "copy":
        by_f = {f: s for f, s in pairs}
    else:
        by_f = {f: s for s, f in pairs}
    body = []
    for k in range(f0, f1_):
        mate = by_f.get(k)
        body.append((sig[seq[k].id], sig[seq[mate].id] if mate is not None else 0))
    return ("dd", inverted, interp, tuple(body))


def _f2_base(state, seq, p, q, L, inverted, remove_right) -> float:
    index = state.prev_index
    if not index:
        return 0.0
    sig = state.sig
    if not inverted:
        i0, j0 = (p, q) if remove_right else (q, p)
    else:
        i0, j0 = (p, q) if remove_right else (q - L + 1, p + L - 1)
    bucket = index.get(("d", (sig[seq[i0].id], sig[seq[j0].id])))
    if not bucket:
        return 0.0
    pairs = _base_pairs(p, q, L, inverted, remove_right)
    return 1.0 if _dup_key(state, "d", inverted, seq, pairs, None) in bucket else 0.0


def _f2_coupled(state, seq, pairs, inverted, interp, f0, f1_) -> float:
    index = state.prev_index
    if not index:
        return 0.0
    sig = state.sig
    if interp == "copy":
        by_f = {f: s for f, s in pairs}
    else:
        by_f = {f: s for s, f in pairs}
    mate = by_f.get(f0)
    first = (sig[seq[f0].id], sig[seq[mate].id] if mate is not None else 0)
    bucket = index.get(("dd", first))
    if not bucket:
        return 0.0
    key = _dup_key(state, "dd", inverted, seq, pairs, (interp, f0, f1_))
    return 1.0 if key in bucket else 0.0


def _spec_key(state, node, cols):
    sig = state.sig
    body = tuple(
        (sig[a.id] if a is not None else 0, sig[b.id] if b is not None else 0)
        for a, b in cols
    )
    return ("s", node, body)


def _spec_f2(state, node, sig1, sig2, moves) -> float:
    index = state.prev_index
    if not index:
        return 0.0
    mv0 = moves[0]
    if mv0 == "m":
        first = (sig1[0], sig2[0])
    elif mv0 == "a":
        first = (sig1[0], 0)
    else:
        first = (0, sig2[0])
    bucket = index.get(("s", first))
    if not bucket:
        return 0.0
    body = []
    i = j = 0
    for mv in moves:
        if mv == "m":
            body.append((sig1[i], sig2[j]))
            i += 1
            j += 1
        elif mv == "a":
            body.append((sig1[i], 0))
            i += 1
        else:
            body.append((0, sig2[j]))
            j += 1
    return 1.0 if ("s", node, tuple(body)) in bucket else 0.0


# ---------------------------------------------------------------------------
# Speciation enumeration.
# ---------------------------------------------------------------------------


def _ready_nodes(state: ProposalState) -> list:
    ready = []
    for name in sorted(state.species_tree.nodes):
        node = state.species_tree.nodes[name]
        if len(node.children) != 2:
            continue
        if all(child.name in state.sequences for child in node.children):
            ready.append(node)
    return ready


def enumerate_speciations(state: ProposalState) -> list[Candidate]:
    out: list[Candidate] = []
    for node in _ready_nodes(state):
        ca, cb = node.children[0].name, node.children[1].name
        out.extend(_speciations_at(state, node.name, ca, cb))
    return out


def _match_rows(state, s1, s2) -> list[int]:
    """Per-row bitmasks of mergeable (i, j) atom pairs across children."""
    pos2: dict = {}
    for j, b in enumerate(s2):
        pos2.setdefault((b.type_id, b.strand), []).append(j)
    token = state.token
    rows = []
    for a in s1:
        mask = 0
        js = pos2.get((a.type_id, a.strand))
        if js:
            la = token[a.id]
            cherries = _cherries(state, a.type_id)
            for j in js:
                if frozenset((la, token[s2[j].id])) in cherries:
                    mask |= 1 << j
        rows.append(mask)
    return rows


def _speciations_at(state, vname, ca, cb) -> list[Candidate]:
    """Rank near-optimal merges of the two child sequences.

    The alignment structures depend only on the children's type-strand
    sequences and the mergeability pattern, so they are cached on exactly
    that (valid across walks); features that read global walk state
    (adjacency counts, the reference history) are recomputed per call.
    """
    s1 = state.sequences[ca]
    s2 = state.sequences[cb]
    rows = _match_rows(state, s1, s2)
    cache_key = (
        tuple((a.type_id, a.strand) for a in s1),
        tuple((b.type_id, b.strand) for b in s2),
        tuple(rows),
    )
    entry = state.caches.spec.get(cache_key)
    if entry is None:
        entry = _spec_structures(state.type_lengths, s1, s2, rows)
        state.caches.spec.put(cache_key, entry)
    base_delta, structures = entry
    adj = state.adj
    # the child-removal part of the adjacency drop is shared by every
    # structure; fold it once and patch only the keys the merged parent
    # touches, so the per-structure loop is over parent_delta alone
    base_drop = 0
    base_terms = {}
    for key, d in base_delta.items():
        before = adj[key]
        term = (
            (1 if before > 0 else 0) - (1 if before + d > 0 else 0)
            if d
            else 0
        )
        base_terms[key] = (before, d, term)
        base_drop += term
    if state.prev_index:
        sig = state.sig
        sig1 = [sig[a.id] for a in s1]
        sig2 = [sig[b.id] for b in s2]
    else:
        sig1 = sig2 = ()
    cands = []
    for struct in structures:
        moves, matched_bp, runs, parent_delta = struct
        f1 = math.log(matched_bp) if matched_bp > 1 else 0.0
        f2 = _spec_f2(state, vname, sig1, sig2, moves)
        drop = base_drop
        for key, d in parent_delta.items():
            hit = base_terms.get(key)
            if hit is not None:
                before, bd, bterm = hit
                d2 = bd + d
                nterm = (
                    (1 if before > 0 else 0) - (1 if before + d2 > 0 else 0)
                    if d2
                    else 0
                )
                drop += nterm - bterm
            elif d:
                before = adj[key]
                drop += (1 if before > 0 else 0) - (1 if before + d > 0 else 0)
        f7 = float(drop)
        f10 = float(runs)
        w = state.weights
        score = w[0] * f1 + w[1] * f2 + w[6] * f7 + w[9] * f10
        cands.append(
            Candidate(
                kind="spec",
                ident=("s", vname, moves),
                node=vname,
                features=(f1, f2, 0.0, 0.0, 0.0, 0.0, f7, 0.0, 0.0, f10),
                score=score,
                payload=(ca, cb),
                delta=None,
            )
        )
    cands.sort(key=lambda c: (-c.score, c.ident))
    return cands[:_SPEC_KEEP]


def _spec_structures(lengths, s1, s2, rows) -> tuple:
    """Near-optimal alignment structures of two child sequences.

    Returns (base_delta, structures): the adjacency removals shared by all
    merges, then per-merge layout tuples.
    """
    n, m = len(s1), len(s2)
    match = [[0] * m for _ in range(n)]
    for i in range(n):
        mask = rows[i]
        if not mask:
            continue
        bp = lengths[s1[i].type_id]
        arow = match[i]
        for j in range(m):
            if (mask >> j) & 1:
                arow[j] = bp
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        row = D[i]
        prev = D[i - 1]
        mrow = match[i - 1]
        for j in range(1, m + 1):
            best = prev[j]
            left = row[j - 1]
            if left > best:
                best = left
            mj = mrow[j - 1]
            if mj:
                diag = prev[j - 1] + mj
                if diag > best:
                    best = diag
            row[j] = best
    opt = D[n][m]
    paths: list[tuple] = []
    stack = [(n, m, 0, ())]
    while stack and len(paths) < _SPEC_PATH_CAP:
        i, j, got, moves = stack.pop()
        if _SPEC_SLACK_DEN * (got + D[i][j]) < _SPEC_SLACK_NUM * opt:
            continue
        if i == 0 and j == 0:
            paths.append(moves)
            continue
        # push in reverse preference order so matches pop first
        if j > 0:
            stack.append((i, j - 1, got, ("b",) + moves))
        if i > 0:
            stack.append((i - 1, j, got, ("a",) + moves))
        if i > 0 and j > 0 and match[i - 1][j - 1]:
            stack.append((i - 1, j - 1, got + match[i - 1][j - 1], ("m",) + moves))
    base_delta: dict = {}
    for key in _seq_adjacencies(s1):
        base_delta[key] = base_delta.get(key, 0) - 1
    for key in _seq_adjacencies(s2):
        base_delta[key] = base_delta.get(key, 0) - 1
    structures = [_spec_structure(lengths, s1, s2, moves) for moves in paths]
    return base_delta, structures


def _spec_structure(lengths, s1, s2, moves) -> tuple:
    parent: list[AtomInstance] = []
    matched_bp = 0
    runs = 0
    prev_move = "m"
    i = j = 0
    for mv in moves:
        if mv == "m":
            parent.append(s1[i])
            matched_bp += lengths[s1[i].type_id]
            i += 1
            j += 1
        elif mv == "a":
            parent.append(s1[i])
            i += 1
        else:
            parent.append(s2[j])
            j += 1
        if mv != "m" and mv != prev_move:
            runs += 1
        prev_move = mv
    parent_delta: dict = {}
    for key in _seq_adjacencies(parent):
        parent_delta[key] = parent_delta.get(key, 0) + 1
    return (moves, matched_bp, runs, parent_delta)


# ---------------------------------------------------------------------------
# Step sampling and application.
# ---------------------------------------------------------------------------


def all_candidates(state: ProposalState) -> list[Candidate]:
    return enumerate_duplications(state) + enumerate_speciations(state)


def sample_step(state, candidates, heat, rng) -> tuple[int, float]:
    """Pick a candidate with probability proportional to weight**heat."""
    if not candidates:
        raise ProposalError("no candidates to sample")
    logits = [heat * c.score for c in candidates]
    peak = max(logits)
    expv = [math.exp(v - peak) for v in logits]
    total = math.fsum(expv)
    u = float(rng.random()) * total
    acc = 0.0
    idx = len(candidates) - 1
    for k, e in enumerate(expv):
        acc += e
        if u < acc:
            idx = k
            break
    return idx, logits[idx] - (peak + math.log(total))


def step_log_prob(candidates, heat, ident) -> float:
    """Exact log-probability of picking ``ident`` among candidates."""
    logits = [heat * c.score for c in candidates]
    peak = max(logits)
    total = math.fsum(math.exp(v - peak) for v in logits)
    for cand, logit in zip(candidates, logits):
        if cand.ident == ident:
            return logit - (peak + math.log(total))
    return float("-inf")


def apply_candidate(state: ProposalState, cand: Candidate) -> None:
    if cand.kind == "spec":
        delta = _apply_speciation(state, cand)
    elif cand.ident[0] == "d":
        delta = _apply_base_dup(state, cand)
    else:
        delta = _apply_coupled_dup(state, cand)
    adj = state.adj
    for key, d in delta.items():
        if d:
            new = adj[key] + d
            if new:
                adj[key] = new
            elif key in adj:
                del adj[key]
    state.unwound.append(cand.ident)


def _apply_base_dup(state, cand) -> dict:
    _, node, p, q, L, inverted, remove_right = cand.ident
    r0, r1, s0, s1 = cand.payload
    pairs = _base_pairs(p, q, L, inverted, remove_right)
    seq = state.sequences[node]
    key = _dup_key(state, "d", inverted, seq, pairs, None)
    for sp, cp in pairs:
        src, cpy = seq[sp], seq[cp]
        state.sig[src.id] |= state.sig[cpy.id]
        _remove_leaf(state, cpy.type_id, state.token[cpy.id])
        del state.sig[cpy.id]
        del state.token[cpy.id]
        state.type_count[cpy.type_id] -= 1
    shift = r1 - r0 if s0 >= r1 else 0
    ev = Duplication(s0 - shift, s1 - shift, r0, inverted)
    state.sequences[node] = seq[:r0] + seq[r1:]
    state.branch_steps.setdefault(node, []).append((ev,))
    state.keys.append(key)
    return cand.delta


def _apply_coupled_dup(state, cand) -> dict:
    _, node, f_span, s_span, chunk, inverted, interp = cand.ident
    _fsp, _ssp, _chk, pairs, restored, restore_at, rho = cand.payload
    seq = state.sequences[node]
    key = _dup_key(state, "dd", inverted, seq, pairs, (interp, f_span[0], f_span[1]))
    f0, f1_ = f_span
    s0, s1 = s_span
    Lf = f1_ - f0
    if interp == "copy":
        # remove the short run; its atoms merge into the full run
        for fpos, spos in pairs:
            src, cpy = seq[fpos], seq[spos]
            state.sig[src.id] |= state.sig[cpy.id]
            _remove_leaf(state, cpy.type_id, state.token[cpy.id])
            del state.sig[cpy.id]
            del state.token[cpy.id]
            state.type_count[cpy.type_id] -= 1
        state.sequences[node] = seq[:s0] + seq[s1:]
        shift = (s1 - s0) if f0 >= s1 else 0
        insert_pos = s0
        dup = Duplication(f0 - shift, f1_ - shift, insert_pos, inverted)
        # rho is the chunk's offset in the full copy's own frame
        del_ev = Deletion(insert_pos + rho[0], insert_pos + rho[1])
    else:
        # remove the full run; restore the chunk inside the short run
        chunk_atoms = [seq[k] for k in range(chunk[0], chunk[1])]
        if inverted:
            donors = list(reversed(chunk_atoms))
            spliced = [
                AtomInstance(state.next_id + i, d.type_id, -d.strand)
                for i, d in enumerate(donors)
            ]
        else:
            donors = chunk_atoms
            spliced = [
                AtomInstance(state.next_id + i, d.type_id, d.strand)
                for i, d in enumerate(donors)
            ]
        state.next_id += len(spliced)
        for donor, fresh in zip(donors, spliced):
            state.sig[fresh.id] = state.sig[donor.id]
            state.token[fresh.id] = state.token[donor.id]
            del state.sig[donor.id]
            del state.token[donor.id]
        for spos, fpos in pairs:
            src, cpy = seq[spos], seq[fpos]
            state.sig[src.id] |= state.sig[cpy.id]
            _remove_leaf(state, cpy.type_id, state.token[cpy.id])
            del state.sig[cpy.id]
            del state.token[cpy.id]
            state.type_count[cpy.type_id] -= 1
        new_seq = []
        for idx, atom in enumerate(seq):
            if idx == restore_at:
                new_seq.extend(spliced)
            if f0 <= idx < f1_:
                continue
            new_seq.append(atom)
        if restore_at == len(seq):
            new_seq.extend(spliced)
        state.sequences[node] = new_seq
        sigma0 = s0 - (Lf if s0 >= f1_ else 0)
        psi = f0 + (len(spliced) if restore_at <= f0 else 0)
        dup = Duplication(sigma0, sigma0 + Lf, psi, inverted)
        sigma_mid = sigma0 + (Lf if psi <= sigma0 else 0)
        del_ev = Deletion(sigma_mid + rho[0], sigma_mid + rho[1])
    state.branch_steps.setdefault(node, []).append((dup, del_ev))
    state.keys.append(key)
    return cand.delta


def _apply_speciation(state, cand) -> dict:
    _, vname, moves = cand.ident
    ca, cb = cand.payload
    s1 = state.sequences[ca]
    s2 = state.sequences[cb]
    cols = []
    parent: list[AtomInstance] = []
    i = j = 0
    for mv in moves:
        if mv == "m":
            cols.append((s1[i], s2[j]))
            parent.append(s1[i])
            i += 1
            j += 1
        elif mv == "a":
            cols.append((s1[i], None))
            parent.append(s1[i])
            i += 1
        else:
            cols.append((None, s2[j]))
            parent.append(s2[j])
            j += 1
    key = _spec_key(state, vname, cols)
    for a, b in cols:
        if a is not None and b is not None:
            state.sig[a.id] |= state.sig[b.id]
            _remove_leaf(state, b.type_id, state.token[b.id])
            del state.sig[b.id]
            del state.token[b.id]
            state.type_count[b.type_id] -= 1
    # contiguous one-sided runs become leading deletions on the other child
    dels = {ca: [], cb: []}
    pos = 0
    k = 0
    while k < len(moves):
        mv = moves[k]
        if mv == "m":
            pos += 1
            k += 1
            continue
        start = pos
        while k < len(moves) and moves[k] == mv:
            pos += 1
            k += 1
        lost_on = cb if mv == "a" else ca
        dels[lost_on].append((start, pos))
    for child in (ca, cb):
        removed = 0
        evs = []
        for start, end in dels[child]:
            evs.append(Deletion(start - removed, end - removed))
            removed += end - start
        if evs:
            state.spec_deletions[child] = evs
    del state.sequences[ca]
    del state.sequences[cb]
    state.sequences[vname] = parent
    state.keys.append(key)
    merged: dict = {}
    for k2 in _seq_adjacencies(s1):
        merged[k2] = merged.get(k2, 0) - 1
    for k2 in _seq_adjacencies(s2):
        merged[k2] = merged.get(k2, 0) - 1
    for k2 in _seq_adjacencies(parent):
        merged[k2] = merged.get(k2, 0) + 1
    return merged


# ---------------------------------------------------------------------------
# Whole walks.
# ---------------------------------------------------------------------------


@dataclass
class ProposalOutcome:
    history: History
    log_q: float
    descriptors: tuple
    keys: tuple
    trees: dict
    ancestral: tuple


def _diagnostic(state: ProposalState) -> str:
    lines = ["proposal walk is stuck; current state:"]
    for node in state.active_nodes():
        body = " ".join(
            f"{a.type_id}{'+' if a.strand > 0 else '-'}"
            for a in state.sequences[node]
        )
        lines.append(f"  {node}: {body}")
    lines.append(f"  steps so far: {len(state.unwound)}")
    return "\n".join(lines)


def _assemble_history(state: ProposalState, root_branch_length: float) -> History:
    (final_node,) = state.sequences
    ancestral = [(a.type_id, a.strand) for a in state.sequences[final_node]]
    events: dict[str, list] = {}
    for branch, steps in state.branch_steps.items():
        ordered = []
        for step in reversed(steps):
            ordered.extend(step)
        events[branch] = ordered
    for branch, dels in state.spec_deletions.items():
        events[branch] = list(dels) + events.get(branch, [])
    return History(
        species_tree=state.species_tree,
        root_branch_length=root_branch_length,
        ancestral=ancestral,
        events={b: evs for b, evs in events.items() if evs},
    )


def run_walk(
    state: ProposalState,
    heat: float,
    rng,
    root_branch_length: float,
    replay: tuple | None = None,
) -> tuple[History | None, float, tuple]:
    """Drive a walk to the ancestor; sample steps or replay descriptors.

    Returns (history, log_q, descriptors).  In replay mode a step absent
    from the candidate set yields log_q = -inf and a None history.
    """
    log_q = 0.0
    max_steps = (
        sum(len(s) for s in state.sequences.values())
        + len(state.species_tree.nodes)
        + 5
    )
    step = 0
    while not state.finished():
        if step >= max_steps:
            raise ProposalError(_diagnostic(state))
        candidates = all_candidates(state)
        if not candidates:
            raise ProposalError(_diagnostic(state))
        if replay is None:
            idx, logp = sample_step(state, candidates, heat, rng)
            cand = candidates[idx]
        else:
            if step >= len(replay):
                return None, float("-inf"), ()
            ident = replay[step]
            logp = step_log_prob(candidates, heat, ident)
            if logp == float("-inf"):
                return None, float("-inf"), ()
            cand = next(c for c in candidates if c.ident == ident)
        apply_candidate(state, cand)
        log_q += logp
        step += 1
    if replay is not None and step != len(replay):
        return None, float("-inf"), ()
    history = _assemble_history(state, root_branch_length)
    return history, log_q, tuple(state.unwound)


def refresh_trees(
    pool: GuideTreePool,
    prev: dict | None,
    rng,
    keep_prob: float = 0.95,
) -> dict:
    """Per-type keep-or-redraw of working trees from the pool."""
    trees = {}
    for tid in sorted(pool.trees):
        if prev is not None and tid in prev and float(rng.random()) < keep_prob:
            trees[tid] = prev[tid]
        else:
            trees[tid] = pool.draw(tid, rng)
    return trees


def propose_history(
    table: AtomTable,
    species_tree: SpeciesTree,
    pool: GuideTreePool,
    rng,
    root_branch_length: float,
    *,
    heat: float = 1.0,
    prev_trees: dict | None = None,
    keep_prob: float = 0.95,
    prev_keys: frozenset = frozenset(),
    weights: tuple = DEFAULT_WEIGHTS,
    dist_cache: dict | None = None,
    caches: ProposalCaches | None = None,
) -> ProposalOutcome:
    """Refresh working trees and walk back to an ancestral sequence."""
    trees = refresh_trees(pool, prev_trees, rng, keep_prob)
    if dist_cache is not None:
        # cached leaf distances are only valid for the tree they came from
        if prev_trees is None:
            dist_cache.clear()
        else:
            for tid, tree in trees.items():
                if prev_trees.get(tid) is not tree:
                    dist_cache.pop(tid, None)
    state = build_state(
        table, species_tree, trees,
        prev_keys=prev_keys, weights=weights, dist_cache=dist_cache,
        caches=caches,
    )
    history, log_q, descriptors = run_walk(state, heat, rng, root_branch_length)
    return ProposalOutcome(
        history=history,
        log_q=log_q,
        descriptors=descriptors,
        keys=tuple(state.keys),
        trees=trees,
        ancestral=tuple(history.ancestral),
    )


def replay_log_q(
    table: AtomTable,
    species_tree: SpeciesTree,
    trees: dict,
    descriptors: tuple,
    root_branch_length: float,
    *,
    heat: float = 1.0,
    f2_keys: frozenset = frozenset(),
    weights: tuple = DEFAULT_WEIGHTS,
    dist_cache: dict | None = None,
    caches: ProposalCaches | None = None,
) -> float:
    """Log-probability of proposing the walk ``descriptors`` under trees."""
    state = build_state(
        table, species_tree, trees,
        prev_keys=f2_keys, weights=weights, dist_cache=dist_cache,
        caches=caches,
    )
    _history, log_q, _desc = run_walk(
        state, heat, np.random.default_rng(0), root_branch_length,
        replay=descriptors,
    )
    return log_q
