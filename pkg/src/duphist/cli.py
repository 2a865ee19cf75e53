"""Command-line pipeline for duplication-history reconstruction.

Subcommands cover the whole workflow: ``simulate`` synthetic clusters,
``atomize`` real sequences, ``pools`` of per-type guide trees, ``sample``
histories by MCMC, ``summarize`` a finished run (optionally against a
known truth), and ``export-tubetree`` for a Graphviz view of a history.
Stages communicate only through files; each output directory gets a
manifest recording config, seeds, and input/output digests.

Exit codes: 0 success, 2 bad input, 3 internal failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources

import numpy as np

from . import __version__
from .atomizer import AtomizerError, atomize
from .atoms import AtomError, read_atoms_tsv, write_atoms_tsv
from .config import Config, ConfigError, read_config, validate_config
from .dataio import (
    ClusterInputError,
    FastaError,
    build_cluster_data,
    read_fasta_file,
    write_fasta_file,
)
from .guidetrees import GuideTreeError, build_pools, read_pools, write_pools
from .history import (
    History,
    HistoryError,
    read_history_file,
    read_history_stream,
    write_history_file,
    write_history_stream,
)
from .manifest import ManifestError, build_manifest, finalize_manifest
from .model import ModelError
from .newick import NewickError
from .sampler import (
    ChainConfig,
    SampleRecord,
    mean_log_score,
    retained,
    run_chains,
    summarize,
    write_adjacency_tsv,
    write_samples_tsv,
    write_summary_tsv,
)
from .simulator import simulate_cluster, write_segment_trees
from .species_tree import SpeciesTree, SpeciesTreeError
from .tubetree import write_tubetree

LOG = logging.getLogger("duphist")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class InputError(ValueError):
    """A problem with user-supplied arguments or files."""


_INPUT_ERRORS = (
    InputError,
    ConfigError,
    FastaError,
    ClusterInputError,
    AtomizerError,
    AtomError,
    GuideTreeError,
    HistoryError,
    SpeciesTreeError,
    NewickError,
    ManifestError,
    OSError,
)


def _setup_logging() -> None:
    name = os.environ.get("DUPHIST_LOG", "warn").lower()
    if name not in _LOG_LEVELS:
        raise InputError(
            f"DUPHIST_LOG must be one of {', '.join(_LOG_LEVELS)} (got {name!r})"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s"
    )


def _packaged(name: str) -> str:
    return str(resources.files("duphist").joinpath("data", name))


def _load_config(args) -> Config:
    try:
        if args.config:
            return read_config(args.config)
        cfg = Config()
        validate_config(cfg)
        return cfg
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc


def _seed(args, default: int = 0) -> int:
    seed = default if args.seed is None else args.seed
    if not 0 <= seed < 2**64:
        raise InputError(f"seed must fit in 64 bits, got {seed}")
    return seed


def _out_dir(args) -> str:
    if not args.out_dir:
        raise InputError("this command needs --out-dir")
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    tree_path = args.species_tree or _packaged("hcm.nwk")
    tree = SpeciesTree.from_file(tree_path)
    base = _seed(args)
    out_root = _out_dir(args)
    if args.batch < 1:
        raise InputError("--batch must be at least 1")
    for k in range(args.batch):
        seed = base + k
        out_dir = (
            out_root
            if args.batch == 1
            else os.path.join(out_root, f"cluster_{seed:03d}")
        )
        os.makedirs(out_dir, exist_ok=True)
        cluster = simulate_cluster(cfg, tree, seed)
        write_fasta_file(os.path.join(out_dir, "sequences.fa"), cluster.fastas)
        write_atoms_tsv(os.path.join(out_dir, "atoms.tsv"), cluster.table)
        write_history_file(
            os.path.join(out_dir, "truth_history.txt"),
            cluster.history,
            meta={"seed": seed},
        )
        write_segment_trees(
            os.path.join(out_dir, "truth_trees.nwk"),
            cluster.replay.segment_trees,
        )
        manifest = build_manifest(
            "simulate",
            config=cfg.snapshot(),
            seed=seed,
            inputs={"species_tree": tree_path},
        )
        finalize_manifest(manifest, out_dir)
        LOG.info(
            "simulated seed=%d: %d atoms, %d events",
            seed,
            len(cluster.table.coords),
            cluster.history.event_count(),
        )
    return 0


def cmd_atomize(args) -> int:
    cfg = _load_config(args)
    window = args.window if args.window is not None else cfg.window
    identity = args.identity if args.identity is not None else cfg.identity
    fastas = read_fasta_file(args.fasta)
    table = atomize(fastas, None, window, identity, cfg.kmer)
    out_dir = _out_dir(args)
    write_atoms_tsv(os.path.join(out_dir, "atoms.tsv"), table)
    manifest = build_manifest(
        "atomize",
        config=dict(cfg.snapshot(), window=window, identity=identity),
        seed=None,
        inputs={"fasta": args.fasta},
    )
    finalize_manifest(manifest, out_dir)
    LOG.info(
        "atomized %d sequences into %d atoms / %d types",
        len(fastas),
        len(table.coords),
        len(table.type_lengths),
    )
    return 0


def cmd_pools(args) -> int:
    cfg = _load_config(args)
    table = read_atoms_tsv(args.atoms)
    fastas = read_fasta_file(args.fasta)
    data = build_cluster_data(table, fastas)
    seed = _seed(args)
    rng = np.random.default_rng([seed, 1])
    pool = build_pools(
        data.type_alignments,
        table.type_lengths,
        cfg.hky(),
        rng,
        iterations=cfg.pool_iterations,
        burn_in=cfg.pool_burn_in,
        thin=cfg.pool_thin,
        prior_mean=cfg.pool_branch_prior_mean,
        collapse_subs=cfg.collapse_subs,
    )
    out_dir = _out_dir(args)
    write_pools(os.path.join(out_dir, "pools.txt"), pool)
    manifest = build_manifest(
        "pools",
        config=cfg.snapshot(),
        seed=seed,
        inputs={"atoms": args.atoms, "fasta": args.fasta},
    )
    finalize_manifest(manifest, out_dir)
    LOG.info("built guide-tree pools for %d types", len(pool.trees))
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    if args.chains is not None:
        cfg.chains = args.chains
    if args.iters is not None:
        cfg.iterations = args.iters
    if args.burnin is not None:
        cfg.burn_in = args.burnin
    try:
        validate_config(cfg)
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc
    tree_path = args.species_tree or _packaged("hcm.nwk")
    tree = SpeciesTree.from_file(tree_path)
    table = read_atoms_tsv(args.atoms)
    fastas = read_fasta_file(args.fasta)
    data = build_cluster_data(table, fastas)
    seed = _seed(args)
    inputs = {
        "atoms": args.atoms,
        "fasta": args.fasta,
        "species_tree": tree_path,
    }
    if args.pools:
        pool = read_pools(args.pools)
        inputs["pools"] = args.pools
    else:
        rng = np.random.default_rng([seed, 1])
        pool = build_pools(
            data.type_alignments,
            table.type_lengths,
            cfg.hky(),
            rng,
            iterations=cfg.pool_iterations,
            burn_in=cfg.pool_burn_in,
            thin=cfg.pool_thin,
            prior_mean=cfg.pool_branch_prior_mean,
            collapse_subs=cfg.collapse_subs,
        )
        LOG.info("built guide-tree pools for %d types", len(pool.trees))
    chain_config = ChainConfig.from_config(cfg, seed)
    chains = run_chains(
        data, tree, pool, cfg.model_params(), chain_config,
        weights=cfg.weights(),
    )
    for chain_id, records in enumerate(chains):
        LOG.info(
            "chain %d: post burn-in mean log-score %.3f",
            chain_id,
            mean_log_score(records, cfg.burn_in),
        )
    out_dir = _out_dir(args)
    with open(os.path.join(out_dir, "samples.tsv"), "w") as fh:
        write_samples_tsv(fh, chains, tree)
    kept = retained([r for ch in chains for r in ch])
    summary = summarize(kept, species_tree=tree)
    with open(os.path.join(out_dir, "summary.tsv"), "w") as fh:
        write_summary_tsv(fh, summary)
    with open(os.path.join(out_dir, "adjacency.tsv"), "w") as fh:
        write_adjacency_tsv(fh, summary)
    with open(os.path.join(out_dir, "retained.txt"), "w") as fh:
        write_history_stream(
            fh,
            (
                (
                    r.history,
                    {
                        "chain": r.chain,
                        "iteration": r.iteration,
                        "log_score": repr(r.log_score),
                    },
                )
                for r in kept
            ),
        )
    write_history_file(
        os.path.join(out_dir, "best_history.txt"),
        summary.best.history,
        meta={"log_score": repr(summary.best.log_score)},
    )
    manifest = build_manifest(
        "sample", config=cfg.snapshot(), seed=seed, inputs=inputs
    )
    finalize_manifest(manifest, out_dir)
    return 0


def _true_focal_events(truth: History, focal: str) -> int:
    node = truth.species_tree.nodes.get(focal)
    if node is None:
        raise InputError(
            f"focal species {focal!r} is not in the truth species tree"
        )
    total = 0
    while node is not None:
        total += len(truth.events.get(node.name, []))
        node = node.parent
    return total


def cmd_summarize(args) -> int:
    retained_path = os.path.join(args.run_dir, "retained.txt")
    entries = read_history_stream(retained_path)
    if not entries:
        raise InputError(f"{retained_path} holds no histories")
    records = []
    for i, (history, meta) in enumerate(entries):
        records.append(
            SampleRecord(
                chain=int(meta.get("chain", 0)),
                iteration=int(meta.get("iteration", i)),
                heat=1.0,
                log_score=float(meta.get("log_score", "nan")),
                accepted=True,
                event_counts=history.counts_by_branch(),
                history=history,
            )
        )
    tree = entries[0][0].species_tree
    truth = read_history_file(args.truth) if args.truth else None
    summary = summarize(records, truth=truth, species_tree=tree)
    out_dir = _out_dir(args)
    with open(os.path.join(out_dir, "summary.tsv"), "w") as fh:
        write_summary_tsv(fh, summary)
    with open(os.path.join(out_dir, "adjacency.tsv"), "w") as fh:
        write_adjacency_tsv(fh, summary)
    inputs = {"retained": retained_path}
    if truth is not None:
        inputs["truth"] = args.truth
        with open(os.path.join(out_dir, "eval.tsv"), "w") as fh:
            fh.write("metric\tfocal\tvalue\n")
            for leaf in tree.leaf_names():
                expected = summary.expected_focal_events(leaf, tree)
                true_count = _true_focal_events(truth, leaf)
                fh.write(f"expected_events\t{leaf}\t{expected:.6g}\n")
                fh.write(f"rounded_events\t{leaf}\t{round(expected)}\n")
                fh.write(f"true_events\t{leaf}\t{true_count}\n")
                fh.write(
                    f"abs_error\t{leaf}\t{abs(round(expected) - true_count)}\n"
                )
            fh.write(
                "incorrect_breakpoints\t-\t"
                f"{summary.incorrect_breakpoints:.6g}\n"
            )
    manifest = build_manifest(
        "summarize", config={}, seed=None, inputs=inputs
    )
    finalize_manifest(manifest, out_dir)
    return 0


def cmd_export_tubetree(args) -> int:
    history = read_history_file(args.history)
    write_tubetree(args.out, history)
    LOG.info("wrote %s", args.out)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring.
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="random seed")
    common.add_argument(
        "--threads",
        type=int,
        default=1,
        metavar="N",
        help="worker thread bound (stages may use fewer)",
    )
    common.add_argument(
        "--out-dir", metavar="PATH", help="directory for output files"
    )

    parser = argparse.ArgumentParser(
        prog="duphist",
        description="Reconstruct duplication histories of gene clusters.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "simulate", parents=[common], help="generate a synthetic cluster"
    )
    p.add_argument("--species-tree", metavar="PATH", help="Newick species tree")
    p.add_argument(
        "--batch",
        type=int,
        default=1,
        metavar="N",
        help="simulate N consecutive seeds into cluster_<seed>/ subdirectories",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "atomize", parents=[common], help="segment sequences into atoms"
    )
    p.add_argument("--fasta", required=True, metavar="PATH")
    p.add_argument("--window", type=int, metavar="BP")
    p.add_argument("--identity", type=float, metavar="FRAC")
    p.set_defaults(func=cmd_atomize)

    p = sub.add_parser(
        "pools", parents=[common], help="sample per-type guide-tree pools"
    )
    p.add_argument("--atoms", required=True, metavar="PATH")
    p.add_argument("--fasta", required=True, metavar="PATH")
    p.set_defaults(func=cmd_pools)

    p = sub.add_parser(
        "sample", parents=[common], help="run MCMC chains over histories"
    )
    p.add_argument("--atoms", required=True, metavar="PATH")
    p.add_argument("--fasta", required=True, metavar="PATH")
    p.add_argument("--species-tree", metavar="PATH", help="Newick species tree")
    p.add_argument("--pools", metavar="PATH", help="reuse a guide-tree pool file")
    p.add_argument("--chains", type=int, metavar="N")
    p.add_argument("--iters", type=int, metavar="N")
    p.add_argument("--burnin", type=int, metavar="N")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser(
        "summarize",
        parents=[common],
        help="summarize a sampling run, optionally against a truth history",
    )
    p.add_argument("--run-dir", required=True, metavar="PATH")
    p.add_argument("--truth", metavar="PATH", help="truth history file")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser(
        "export-tubetree",
        parents=[common],
        help="render a history as a Graphviz DOT file",
    )
    p.add_argument("--history", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_export_tubetree)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal invariant violations
        LOG.debug("internal failure", exc_info=True)
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
