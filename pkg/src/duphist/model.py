"""Generative model: event priors, branch scores and the joint score.

Events on a branch of length L follow a Poisson process with rate
``lambda_rate`` per unit branch length. Each event is a deletion with
probability ``p_deletion``, otherwise a duplication. Duplication length
and distance are geometric in bp (support starting at 1, p = 1/mean);
distance is 1 plus the bp gap between the source edge and the insertion
point so a tandem duplication has distance 1. Position terms are uniform
over the bp length of the sequence just before the event. Invalid draws
are rejected in the simulator; scoring ignores that truncation on
purpose, so the two sides stay deliberately asymmetric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .atoms import AtomTable
from .events import Deletion, Duplication, Event
from .history import History, HistoryError, ReplayResult, replay_history
from .substitution import HkyParams, pruning_log_likelihood

NEG_INF = float("-inf")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    lambda_rate: float = 200.0
    mean_dup_length: float = 14307.0
    mean_dup_distance: float = 306718.0
    p_inversion: float = 0.39
    p_deletion: float = 0.05
    mean_del_length: float = 14307.0
    root_branch_length: float = 0.5
    hky: HkyParams = field(default_factory=lambda: HkyParams(4.0, (0.25, 0.25, 0.25, 0.25)))

    def __post_init__(self):
        if not self.lambda_rate >= 0:
            raise ModelError("lambda must be nonnegative")
        for name in ("mean_dup_length", "mean_dup_distance", "mean_del_length"):
            if not getattr(self, name) >= 1:
                raise ModelError(f"{name} must be >= 1")
        for name in ("p_inversion", "p_deletion"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ModelError(f"{name} must be in [0, 1]")
        if not self.root_branch_length > 0:
            raise ModelError("root_branch_length must be positive")


def geometric_log_pmf(mean: float, k: int) -> float:
    """log P(K = k) for K geometric on {1, 2, ...} with the given mean."""
    if mean < 1:
        raise ModelError(f"geometric mean must be >= 1, got {mean}")
    if k < 1 or k != int(k):
        raise ModelError(f"geometric support starts at 1, got {k}")
    p = 1.0 / mean
    if p >= 1.0:
        return 0.0 if k == 1 else NEG_INF
    return (k - 1) * math.log1p(-p) + math.log(p)


def poisson_log_pmf(lam: float, k: int) -> float:
    if lam < 0:
        raise ModelError(f"poisson rate must be nonnegative, got {lam}")
    if k < 0 or k != int(k):
        raise ModelError(f"poisson support starts at 0, got {k}")
    if lam == 0:
        return 0.0 if k == 0 else NEG_INF
    return k * math.log(lam) - lam - math.lgamma(k + 1)


def _log(p: float) -> float:
    return math.log(p) if p > 0 else NEG_INF

LOG_HALF = math.log(0.5)


def event_log_prior(e: Event, len_before_bp: int, params: ModelParams) -> float:
    """Log prior of one event given the bp length just before it."""
    if len_before_bp <= 0:
        return NEG_INF
    if isinstance(e, Duplication):
        if e.length_bp is None or e.distance_bp is None:
            raise ModelError("duplication lacks bp geometry; replay it first")
        if e.length_bp < 1 or e.distance_bp < 1:
            raise ModelError("nonpositive duplication length or distance")
        lp = _log(1.0 - params.p_deletion) + LOG_HALF
        lp += _log(params.p_inversion) if e.inverted else _log(1.0 - params.p_inversion)
        lp += geometric_log_pmf(params.mean_dup_length, e.length_bp)
        lp += geometric_log_pmf(params.mean_dup_distance, e.distance_bp)
        lp -= math.log(len_before_bp)
        return lp
    if isinstance(e, Deletion):
        if e.length_bp is None:
            raise ModelError("deletion lacks bp geometry; replay it first")
        if e.length_bp < 1:
            raise ModelError("nonpositive deletion length")
        lp = _log(params.p_deletion)
        lp += geometric_log_pmf(params.mean_del_length, e.length_bp)
        lp -= math.log(len_before_bp)
        return lp
    raise ModelError(f"unknown event type {type(e).__name__}")


def branch_log_prob(scored_events, branch_length: float, params: ModelParams) -> float:
    """Poisson count term plus per-event priors for one branch."""
    k = len(scored_events)
    lp = poisson_log_pmf(params.lambda_rate * branch_length, k)
    for rec in scored_events:
        lp += event_log_prior(rec.event, rec.len_before_bp, params)
        if lp == NEG_INF:
            return NEG_INF
    return lp


class PruningCache:
    """Memoizes per-type tree likelihoods keyed by the exact tree shape."""

    def __init__(self, max_entries: int = 200_000):
        self.max_entries = max_entries
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value):
        if len(self._store) >= self.max_entries:
            self._store.clear()
        self._store[key] = value


@dataclass
class ClusterData:
    """Observed atoms plus per-type positional alignments.

    ``type_alignments[tid]`` maps (species, atom index) leaf labels to
    uint8 code arrays, all equal length for a type.
    """

    table: AtomTable
    type_alignments: dict[int, dict[tuple[str, int], "object"]]


def history_log_likelihood(
    result: ReplayResult,
    data: ClusterData,
    params: ModelParams,
    cache: PruningCache | None = None,
) -> float:
    total = 0.0
    for tid in sorted(data.type_alignments):
        tree = result.segment_trees.get(tid)
        if tree is None:
            return NEG_INF
        key = (tid, tree)
        if cache is not None:
            known = cache.get(key)
            if known is not None:
                total += known
                cache.hits += 1
                continue
        value = pruning_log_likelihood(tree, data.type_alignments[tid], params.hky)
        if cache is not None:
            cache.put(key, value)
            cache.misses += 1
        total += value
    return total


def joint_log_score_from_replay(
    result: ReplayResult,
    h: History,
    data: ClusterData,
    params: ModelParams,
    cache: PruningCache | None = None,
) -> float:
    total = 0.0
    for branch in h.species_tree.branch_names():
        length = h.species_tree.branch_length(branch, h.root_branch_length)
        total += branch_log_prob(result.branch_events[branch], length, params)
        if total == NEG_INF:
            return NEG_INF
    lik = history_log_likelihood(result, data, params, cache)
    if lik == NEG_INF:
        return NEG_INF
    return total + lik


def joint_log_score(
    h: History,
    data: ClusterData,
    params: ModelParams,
    cache: PruningCache | None = None,
) -> float:
    """Unnormalized log posterior of a history given the atom data.

    The caller is responsible for the history replaying to the observed
    sequences (propose_history and the simulator both guarantee it);
    structural failures return -inf rather than raising.
    """
    try:
        result = replay_history(h, data.table.type_lengths)
    except (HistoryError, ValueError):
        return NEG_INF
    return joint_log_score_from_replay(result, h, data, params, cache)
