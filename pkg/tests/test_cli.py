"""CLI verbs end to end (in-process transport, small data)."""

import json

import numpy as np
import pytest

from lshpipe.cli import main
from lshpipe.dataio import read_vectors


@pytest.fixture(scope="module")
def data_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = str(root / "base.fvecs")
    query = str(root / "query.fvecs")
    truth = str(root / "gt.ivecs")
    assert (
        main(
            [
                "gen-data",
                "--out-base", base,
                "--out-query", query,
                "--n-points", "3000",
                "--n-queries", "40",
                "-d", "16",
                "--clusters", "4",
                "--spread", "3.0",
                "--data-seed", "9",
            ]
        )
        == 0
    )
    assert (
        main(["ground-truth", "--base", base, "--query", query, "--out", truth, "-k", "10"]) == 0
    )
    return base, query, truth


def test_gen_data_files_wellformed(data_files):
    base, query, truth = data_files
    assert len(read_vectors(base)) == 3000
    assert len(read_vectors(query)) == 40
    gt = read_vectors(truth)
    assert gt.coords.shape == (40, 10)


def test_build_verb(data_files, capsys):
    base, query, _ = data_files
    rc = main(
        ["build", "--base", base, "--query", query, "-L", "4", "-M", "8", "--n-bi", "2", "--n-dp", "4"]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "indexed 3000 vectors" in out
    assert "census" in out


def test_search_report_cycle(data_files, tmp_path, capsys):
    base, query, truth = data_files
    report_path = str(tmp_path / "rep.json")
    csv_path = str(tmp_path / "runs.csv")
    rc = main(
        [
            "search",
            "--base", base,
            "--query", query,
            "--truth", truth,
            "-L", "4",
            "-M", "8",
            "-T", "4",
            "--n-bi", "2",
            "--n-dp", "4",
            "--run-id", "cli-test",
            "--report", report_path,
            "--csv", csv_path,
        ]
    )
    assert rc == 0
    report = json.loads(open(report_path).read())
    assert report["run_id"] == "cli-test"
    assert 0.0 <= report["recall"] <= 1.0
    # report verb recomputes recall offline and agrees
    assert main(["report", report_path]) == 0
    out = capsys.readouterr().out
    assert "recomputed" in out
    header = open(csv_path).readline().strip().split(",")
    assert header[:4] == ["run_id", "L", "M", "T"]


def test_sweep_verb(data_files, tmp_path, capsys):
    base, query, truth = data_files
    csv_path = str(tmp_path / "sweep.csv")
    rc = main(
        [
            "sweep",
            "--base", base,
            "--query", query,
            "--truth", truth,
            "-L", "4",
            "-M", "8",
            "--n-bi", "1",
            "--n-dp", "2",
            "--axis", "T",
            "--values", "1,4",
            "--csv", csv_path,
        ]
    )
    assert rc == 0
    rows = open(csv_path).read().strip().split("\n")
    assert len(rows) == 3  # header + 2 runs
    out = capsys.readouterr().out
    assert out.count("recall@10") == 2


def test_config_file_with_overrides(data_files, tmp_path):
    base, query, truth = data_files
    cfg = {
        "data": {"synthetic": None, "base_path": base, "query_path": query, "truth_path": truth},
        "family": {"seed": 2, "L": 4, "M": 8},
        "search": {"k": 10, "T": 1},
        "topology": {"n_bi": 1, "n_dp": 2},
    }
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    report_path = str(tmp_path / "r.json")
    rc = main(["search", "--config", cfg_path, "-T", "4", "--report", report_path])
    assert rc == 0
    report = json.loads(open(report_path).read())
    assert report["config"]["search"]["T"] == 4  # flag overrides file
    assert report["config"]["family"]["L"] == 4
