"""End-to-end command-line pipeline tests on small synthetic clusters."""
import json
import os

import pytest

from duphist.atoms import read_atoms_tsv
from duphist.cli import main
from duphist.dataio import read_fasta_file
from duphist.guidetrees import read_pools
from duphist.history import read_history_file, read_history_stream
from duphist.manifest import MANIFEST_NAME, read_manifest

SMALL_CFG = """
# small run for pipeline tests
lambda = 30
root_branch_length = 0.02
ancestral_length = 4000
pool_iterations = 300
pool_burn_in = 100
pool_thin = 10
iterations = 60
burn_in = 20
"""


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL_CFG)
    return str(path)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory, cfg_path):
    out = tmp_path_factory.mktemp("sim")
    rc = main([
        "simulate", "--config", cfg_path, "--seed", "7",
        "--out-dir", str(out),
    ])
    assert rc == 0
    return str(out)


def test_simulate_outputs_round_trip(sim_dir):
    names = set(os.listdir(sim_dir))
    assert {
        "sequences.fa", "atoms.tsv", "truth_history.txt",
        "truth_trees.nwk", MANIFEST_NAME,
    } <= names
    fastas = read_fasta_file(os.path.join(sim_dir, "sequences.fa"))
    assert set(fastas) == {"human", "chimp", "macaque"}
    table = read_atoms_tsv(os.path.join(sim_dir, "atoms.tsv"))
    assert table.validate() == []
    truth = read_history_file(os.path.join(sim_dir, "truth_history.txt"))
    assert truth.ancestral
    manifest = read_manifest(os.path.join(sim_dir, MANIFEST_NAME))
    assert manifest.command == "simulate"
    assert manifest.seed == 7
    assert set(manifest.outputs) == names - {MANIFEST_NAME}


def test_simulate_is_deterministic(tmp_path, cfg_path, sim_dir):
    again = tmp_path / "again"
    rc = main([
        "simulate", "--config", cfg_path, "--seed", "7",
        "--out-dir", str(again),
    ])
    assert rc == 0
    first = read_manifest(os.path.join(sim_dir, MANIFEST_NAME))
    second = read_manifest(str(again / MANIFEST_NAME))
    assert first.matches(second)
    assert first.created != "" and second.created != ""
    for name in first.outputs:
        with open(os.path.join(sim_dir, name), "rb") as fh:
            a = fh.read()
        assert (again / name).read_bytes() == a


def test_simulate_zero_rate_gives_empty_history(tmp_path, cfg_path):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text(SMALL_CFG + "lambda = 0\n")
    out = tmp_path / "zero"
    rc = main([
        "simulate", "--config", str(cfg), "--seed", "1",
        "--out-dir", str(out),
    ])
    assert rc == 0
    truth = read_history_file(str(out / "truth_history.txt"))
    assert truth.event_count() == 0
    assert truth.ancestral == [(1, 1)]


def test_simulate_batch_writes_per_seed_directories(tmp_path, cfg_path):
    out = tmp_path / "batch"
    rc = main([
        "simulate", "--config", cfg_path, "--seed", "3", "--batch", "3",
        "--out-dir", str(out),
    ])
    assert rc == 0
    subdirs = sorted(os.listdir(out))
    assert subdirs == ["cluster_003", "cluster_004", "cluster_005"]
    for i, sub in enumerate(subdirs):
        manifest = read_manifest(str(out / sub / MANIFEST_NAME))
        assert manifest.seed == 3 + i


def test_atomize_on_simulated_fasta(tmp_path, cfg_path, sim_dir):
    out = tmp_path / "atoms"
    rc = main([
        "atomize", "--config", cfg_path,
        "--fasta", os.path.join(sim_dir, "sequences.fa"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    table = read_atoms_tsv(str(out / "atoms.tsv"))
    assert table.validate() == []
    assert len(table.coords) >= 3


@pytest.fixture(scope="module")
def pools_dir(tmp_path_factory, cfg_path, sim_dir):
    out = tmp_path_factory.mktemp("pools")
    rc = main([
        "pools", "--config", cfg_path, "--seed", "7",
        "--atoms", os.path.join(sim_dir, "atoms.tsv"),
        "--fasta", os.path.join(sim_dir, "sequences.fa"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    return str(out)


def test_pools_file_round_trips(pools_dir, sim_dir):
    pool = read_pools(os.path.join(pools_dir, "pools.txt"))
    table = read_atoms_tsv(os.path.join(sim_dir, "atoms.tsv"))
    assert set(pool.trees) == set(table.type_lengths)
    assert all(len(trees) >= 1 for trees in pool.trees.values())


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, cfg_path, sim_dir, pools_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main([
        "sample", "--config", cfg_path, "--seed", "5",
        "--atoms", os.path.join(sim_dir, "atoms.tsv"),
        "--fasta", os.path.join(sim_dir, "sequences.fa"),
        "--pools", os.path.join(pools_dir, "pools.txt"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    return str(out)


def test_sample_outputs(run_dir):
    names = set(os.listdir(run_dir))
    assert {
        "samples.tsv", "summary.tsv", "adjacency.tsv",
        "retained.txt", "best_history.txt", MANIFEST_NAME,
    } <= names
    with open(os.path.join(run_dir, "samples.tsv")) as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 1 + 2 * 60  # header + two chains of 60
    entries = read_history_stream(os.path.join(run_dir, "retained.txt"))
    assert len(entries) == 2 * 40  # iterations >= burn-in, both chains
    chains = {meta["chain"] for _h, meta in entries}
    assert chains == {"0", "1"}
    best = read_history_file(os.path.join(run_dir, "best_history.txt"))
    assert best.ancestral
    manifest = read_manifest(os.path.join(run_dir, MANIFEST_NAME))
    assert manifest.command == "sample"
    assert manifest.config["iterations"] == 60


def test_sample_cli_overrides(tmp_path, cfg_path, sim_dir, pools_dir):
    out = tmp_path / "short"
    rc = main([
        "sample", "--config", cfg_path, "--seed", "5",
        "--iters", "10", "--burnin", "4", "--chains", "1",
        "--atoms", os.path.join(sim_dir, "atoms.tsv"),
        "--fasta", os.path.join(sim_dir, "sequences.fa"),
        "--pools", os.path.join(pools_dir, "pools.txt"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    with open(out / "samples.tsv") as fh:
        assert len(fh.read().splitlines()) == 1 + 10


def test_sample_is_deterministic(tmp_path, cfg_path, sim_dir, pools_dir, run_dir):
    out = tmp_path / "rerun"
    rc = main([
        "sample", "--config", cfg_path, "--seed", "5",
        "--atoms", os.path.join(sim_dir, "atoms.tsv"),
        "--fasta", os.path.join(sim_dir, "sequences.fa"),
        "--pools", os.path.join(pools_dir, "pools.txt"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    first = read_manifest(os.path.join(run_dir, MANIFEST_NAME))
    second = read_manifest(str(out / MANIFEST_NAME))
    assert first.matches(second)


def test_summarize_matches_sample_summaries(tmp_path, run_dir, sim_dir):
    out = tmp_path / "sum"
    rc = main([
        "summarize", "--run-dir", run_dir,
        "--truth", os.path.join(sim_dir, "truth_history.txt"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    for name in ("summary.tsv", "adjacency.tsv"):
        with open(os.path.join(run_dir, name)) as fh:
            original = fh.read()
        assert (out / name).read_text() == original
    rows = [
        line.split("\t")
        for line in (out / "eval.tsv").read_text().splitlines()
    ]
    assert rows[0] == ["metric", "focal", "value"]
    metrics = {r[0] for r in rows[1:]}
    assert metrics == {
        "expected_events", "rounded_events", "true_events", "abs_error",
        "incorrect_breakpoints",
    }
    focal = {r[1] for r in rows[1:] if r[0] == "expected_events"}
    assert focal == {"human", "chimp", "macaque"}


def test_export_tubetree(tmp_path, sim_dir):
    out = tmp_path / "tube.dot"
    rc = main([
        "export-tubetree",
        "--history", os.path.join(sim_dir, "truth_history.txt"),
        "--out", str(out),
    ])
    assert rc == 0
    text = out.read_text()
    assert text.startswith("digraph")
    assert text.count("subgraph cluster_") == 5  # three leaves + two inner


def test_input_errors_exit_2(tmp_path, cfg_path):
    assert main([
        "simulate", "--config", str(tmp_path / "missing.cfg"),
        "--out-dir", str(tmp_path / "x"),
    ]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main([
        "simulate", "--config", str(bad), "--out-dir", str(tmp_path / "y"),
    ]) == 2
    assert main([
        "export-tubetree", "--history", str(tmp_path / "nope.txt"),
        "--out", str(tmp_path / "z.dot"),
    ]) == 2
    assert main([
        "simulate", "--config", cfg_path, "--seed", "-1",
        "--out-dir", str(tmp_path / "w"),
    ]) == 2


def test_missing_out_dir_exits_2(cfg_path):
    assert main(["simulate", "--config", cfg_path]) == 2


def test_bad_log_level_exits_2(monkeypatch, tmp_path, cfg_path):
    monkeypatch.setenv("DUPHIST_LOG", "chatty")
    assert main([
        "simulate", "--config", cfg_path, "--out-dir", str(tmp_path / "v"),
    ]) == 2


def test_internal_failure_exits_3(monkeypatch, tmp_path, cfg_path):
    import duphist.cli as cli_mod

    def boom(*_args, **_kwargs):
        raise RuntimeError("induced failure")

    monkeypatch.setattr(cli_mod, "simulate_cluster", boom)
    assert main([
        "simulate", "--config", cfg_path, "--out-dir", str(tmp_path / "u"),
    ]) == 3


def test_manifest_json_is_valid(run_dir):
    with open(os.path.join(run_dir, MANIFEST_NAME)) as fh:
        raw = json.load(fh)
    assert sorted(raw) == [
        "command", "config", "created", "inputs", "outputs", "seed", "version",
    ]
    assert all(len(digest) == 64 for digest in raw["outputs"].values())
