"""Metropolis-Hastings chains over histories, plus posterior summaries.

One chain holds a current history H and repeatedly proposes a full
replacement H' by re-running the guided unwinding walk. The proposal
density is available in both directions (the reverse direction replays
H's step descriptors under the newly drawn working trees), so the
acceptance ratio is exact. Heats flatten the proposal's step weights on
a fixed cyclic schedule; the target density is never tempered.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .atoms import normalize_adjacency, strand_str
from .events import Deletion, Duplication
from .guidetrees import GuideTreePool
from .history import History
from .model import (
    ClusterData,
    ModelParams,
    PruningCache,
    joint_log_score,
)
from .proposal import (
    DEFAULT_WEIGHTS,
    ProposalCaches,
    propose_history,
    replay_log_q,
)
from .species_tree import SpeciesTree

log = logging.getLogger(__name__)

NEG_INF = float("-inf")

_INIT_TRIES = 25


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    """Chain schedule; heats cycle per iteration."""

    iterations: int = 10000
    burn_in: int = 2500
    chains: int = 2
    seed: int = 0
    heats: tuple = (0.5, 0.6, 1.0, 1.2)
    keep_prob: float = 0.95

    def __post_init__(self):
        if self.chains < 1:
            raise SamplerError("need at least one chain")
        if self.iterations < 0 or self.burn_in < 0:
            raise SamplerError("negative chain schedule")
        if self.iterations and self.burn_in >= self.iterations:
            raise SamplerError("burn-in must be shorter than the chain")
        if not self.heats:
            raise SamplerError("empty heat schedule")

    @classmethod
    def from_config(cls, config, seed: int) -> "ChainConfig":
        return cls(
            iterations=config.iterations,
            burn_in=config.burn_in,
            chains=config.chains,
            seed=seed,
            heats=tuple(config.heats),
            keep_prob=config.tree_keep_prob,
        )


@dataclass(slots=True)
class SampleRecord:
    """State of one chain after one iteration."""

    chain: int
    iteration: int
    heat: float
    log_score: float
    accepted: bool
    event_counts: dict  # branch -> (duplications, deletions)
    history: History | None  # retained post burn-in only


@dataclass
class ClusterWorkspace:
    """Caches shared by every chain run on one cluster.

    Proposal structure caches and tree likelihood caches are keyed on
    content, so sharing them never changes results, only speed. Working
    tree distances are keyed per type for the chain's current trees and
    must stay chain-private.
    """

    proposal: ProposalCaches = field(default_factory=ProposalCaches)
    pruning: PruningCache = field(default_factory=PruningCache)


def event_counts(h: History) -> dict:
    counts = {}
    for branch, events in h.events.items():
        dups = sum(1 for e in events if isinstance(e, Duplication))
        dels = sum(1 for e in events if isinstance(e, Deletion))
        counts[branch] = (dups, dels)
    return counts


def mh_accept(log_p_cur, log_p_prop, log_q_fwd, log_q_rev, rng) -> bool:
    """One acceptance decision; an impossible reverse move forces reject."""
    if log_q_rev == NEG_INF or log_p_prop == NEG_INF:
        return False
    log_ratio = log_p_prop + log_q_rev - log_p_cur - log_q_fwd
    u = float(rng.random())
    if u <= 0.0:
        return True
    return math.log(u) < log_ratio


def run_chain(
    data: ClusterData,
    species_tree: SpeciesTree,
    pool: GuideTreePool,
    params: ModelParams,
    config: ChainConfig,
    chain_id: int = 0,
    *,
    weights: tuple = DEFAULT_WEIGHTS,
    workspace: ClusterWorkspace | None = None,
) -> list[SampleRecord]:
    """Run one chain; the rng stream is seeded as base seed + chain id."""
    if config.iterations == 0:
        return []
    if workspace is None:
        workspace = ClusterWorkspace()
    table = data.table
    rng = np.random.default_rng(config.seed + chain_id)
    dist_cache: dict = {}
    rbl = params.root_branch_length

    cur = None
    lp_cur = NEG_INF
    for attempt in range(_INIT_TRIES):
        cur = propose_history(
            table, species_tree, pool, rng, rbl, heat=1.0,
            weights=weights, dist_cache=dist_cache,
            caches=workspace.proposal,
        )
        lp_cur = joint_log_score(
            cur.history, data, params, workspace.pruning
        )
        if lp_cur > NEG_INF:
            break
    else:
        raise SamplerError(
            f"chain {chain_id}: no scoreable starting history "
            f"in {_INIT_TRIES} draws"
        )
    cur_history = cur.history
    cur_desc = cur.descriptors
    cur_keys = frozenset(cur.keys)
    trees = cur.trees
    cur_counts = event_counts(cur_history)

    heats = config.heats
    nheats = len(heats)
    records = []
    accepted_n = 0
    for it in range(config.iterations):
        heat = heats[it % nheats]
        out = propose_history(
            table, species_tree, pool, rng, rbl, heat=heat,
            prev_trees=trees, keep_prob=config.keep_prob,
            prev_keys=cur_keys, weights=weights,
            dist_cache=dist_cache, caches=workspace.proposal,
        )
        trees = out.trees
        if out.descriptors == cur_desc:
            # the walk re-proposed the current history: the target terms
            # cancel and both proposal directions replay the same step
            # sequence under the same conditioning, so the ratio is one
            accepted = True
        else:
            lp_prop = joint_log_score(
                out.history, data, params, workspace.pruning
            )
            lq_rev = replay_log_q(
                table, species_tree, trees, cur_desc, rbl, heat=heat,
                f2_keys=frozenset(out.keys), weights=weights,
                dist_cache=dist_cache, caches=workspace.proposal,
            )
            accepted = mh_accept(lp_cur, lp_prop, out.log_q, lq_rev, rng)
            if accepted:
                cur_history = out.history
                cur_desc = out.descriptors
                cur_keys = frozenset(out.keys)
                lp_cur = lp_prop
                cur_counts = event_counts(cur_history)
        if accepted:
            accepted_n += 1
        records.append(
            SampleRecord(
                chain=chain_id,
                iteration=it,
                heat=heat,
                log_score=lp_cur,
                accepted=accepted,
                event_counts=cur_counts,
                history=cur_history if it >= config.burn_in else None,
            )
        )
    log.info(
        "chain %d: %d iterations, %.1f%% accepted, final score %.3f",
        chain_id, config.iterations,
        100.0 * accepted_n / config.iterations, lp_cur,
    )
    return records


def run_chains(
    data: ClusterData,
    species_tree: SpeciesTree,
    pool: GuideTreePool,
    params: ModelParams,
    config: ChainConfig,
    *,
    weights: tuple = DEFAULT_WEIGHTS,
) -> list[list[SampleRecord]]:
    """All chains of one cluster, sharing content-keyed caches."""
    workspace = ClusterWorkspace()
    return [
        run_chain(
            data, species_tree, pool, params, config, chain,
            weights=weights, workspace=workspace,
        )
        for chain in range(config.chains)
    ]


# ---------------------------------------------------------------------------
# Posterior summaries.
# ---------------------------------------------------------------------------


@dataclass
class BranchStats:
    dup_mean: float
    dup_sd: float
    del_mean: float
    del_sd: float


@dataclass
class PosteriorSummary:
    branches: dict  # branch -> BranchStats
    adjacency: dict  # canonical ((typeA, strandA), (typeB, strandB)) -> freq
    best: SampleRecord
    incorrect_breakpoints: float | None = None

    def expected_focal_events(self, focal: str, tree: SpeciesTree) -> float:
        """Mean total event count on the branches from the root to a leaf."""
        node = tree.nodes[focal]
        total = 0.0
        while node is not None:
            stats = self.branches.get(node.name)
            if stats is not None:
                total += stats.dup_mean + stats.del_mean
            node = node.parent
        return total


def ancestral_adjacencies(ancestral) -> set:
    out = set()
    for left, right in zip(ancestral, ancestral[1:]):
        out.add(normalize_adjacency(tuple(left), tuple(right)))
    return out


def retained(records: list[SampleRecord]) -> list[SampleRecord]:
    return [r for r in records if r.history is not None]


def summarize(
    samples: list[SampleRecord],
    truth: History | None = None,
    species_tree: SpeciesTree | None = None,
) -> PosteriorSummary:
    """Posterior summary over retained samples (from any number of chains)."""
    samples = [r for r in samples if r.history is not None]
    if not samples:
        raise SamplerError("no retained samples to summarize")
    n = len(samples)
    if species_tree is None:
        species_tree = samples[0].history.species_tree
    branches = {}
    for branch in species_tree.branch_names():
        dups = np.array(
            [r.event_counts.get(branch, (0, 0))[0] for r in samples],
            dtype=float,
        )
        dels = np.array(
            [r.event_counts.get(branch, (0, 0))[1] for r in samples],
            dtype=float,
        )
        branches[branch] = BranchStats(
            dup_mean=float(dups.mean()),
            dup_sd=float(dups.std()),
            del_mean=float(dels.mean()),
            del_sd=float(dels.std()),
        )
    adjacency: dict = {}
    for r in samples:
        for key in ancestral_adjacencies(r.history.ancestral):
            adjacency[key] = adjacency.get(key, 0) + 1
    adjacency = {k: c / n for k, c in adjacency.items()}
    best = max(samples, key=lambda r: r.log_score)
    incorrect = None
    if truth is not None:
        true_adj = ancestral_adjacencies(truth.ancestral)
        incorrect = (
            sum(
                len(ancestral_adjacencies(r.history.ancestral) - true_adj)
                for r in samples
            )
            / n
        )
    return PosteriorSummary(
        branches=branches,
        adjacency=adjacency,
        best=best,
        incorrect_breakpoints=incorrect,
    )


def mean_log_score(records: list[SampleRecord], burn_in: int) -> float:
    tail = [r.log_score for r in records if r.iteration >= burn_in]
    if not tail:
        raise SamplerError("no post burn-in records")
    return float(np.mean(tail))


# ---------------------------------------------------------------------------
# Tab-separated outputs.
# ---------------------------------------------------------------------------


def write_samples_tsv(fh, chains: list[list[SampleRecord]],
                      species_tree: SpeciesTree) -> None:
    """One line per iteration: chain, iteration, score, accepted, counts."""
    branches = list(species_tree.branch_names())
    header = ["chain", "iteration", "log_score", "accepted"]
    for branch in branches:
        header.append(f"dup_{branch}")
        header.append(f"del_{branch}")
    fh.write("\t".join(header) + "\n")
    for records in chains:
        for r in records:
            row = [
                str(r.chain),
                str(r.iteration),
                f"{r.log_score:.6f}",
                "1" if r.accepted else "0",
            ]
            for branch in branches:
                dups, dels = r.event_counts.get(branch, (0, 0))
                row.append(str(dups))
                row.append(str(dels))
            fh.write("\t".join(row) + "\n")


def write_summary_tsv(fh, summary: PosteriorSummary) -> None:
    fh.write("branch\tdup_mean\tdup_sd\tdel_mean\tdel_sd\n")
    for branch in sorted(summary.branches):
        s = summary.branches[branch]
        fh.write(
            f"{branch}\t{s.dup_mean:.6f}\t{s.dup_sd:.6f}"
            f"\t{s.del_mean:.6f}\t{s.del_sd:.6f}\n"
        )


def write_adjacency_tsv(fh, summary: PosteriorSummary) -> None:
    fh.write("typeA\ttypeB\tfrequency\n")
    rows = sorted(summary.adjacency.items(), key=lambda kv: (-kv[1], kv[0]))
    for (left, right), freq in rows:
        a = f"{left[0]}{strand_str(left[1])}"
        b = f"{right[0]}{strand_str(right[1])}"
        fh.write(f"{a}\t{b}\t{freq:.6f}\n")
