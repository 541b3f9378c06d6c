import json
import shutil
import subprocess

import pytest

from gltprune import cli, graphio, pruner

SMALL = {
    "sbm_blocks": [7, 7, 6],
    "sbm_p_in": 0.35,
    "sbm_p_out": 0.06,
    "sbm_feature_dim": 6,
    "sbm_train_per_class": 3,
    "sbm_val_per_class": 2,
    "t_inner": 2,
    "retrain_epochs": 4,
    "probe_epochs": 2,
    "max_rounds": 2,
    "hidden": 4,
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)


def test_prune_writes_outputs(config, tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["prune", "--config", str(config), "--method", "ours", "--seed", "7", "--out", str(out)])
    assert rc == 0
    for name in ("metrics.csv", "summary.json", "ticket.glt"):
        assert (out / name).is_file()
    t = pruner.load_ticket(out / "ticket.glt")
    assert t.round == 2 and t.config["seed"] == 7
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [7] and summary["methods"] == ["ours"]
    assert "final test_acc" in capsys.readouterr().out


def test_out_dir_from_environment(config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["prune", "--config", str(config), "--method", "random"]) == 0
    assert (tmp_path / "env" / "metrics.csv").is_file()
    # --out beats the environment
    assert cli.main(["prune", "--config", str(config), "--method", "random", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "metrics.csv").is_file()


def test_set_overrides_config(config, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["prune", "--config", str(config), "--method", "random", "--set", "max_rounds=1", "--out", str(out)]) == 0
    assert pruner.load_ticket(out / "ticket.glt").round == 1


def test_analyze_edges_matches_library(tmp_path, capsys, small_graph):
    graphio.save_planetoid_dir(small_graph, tmp_path / "g")
    assert cli.main(["analyze-edges", "--dataset", str(tmp_path / "g")]) == 0
    count, frac = graphio.edges_related_to_loss(small_graph, 2)
    assert capsys.readouterr().out.strip() == f"related_edges={count} total_edges={small_graph.num_edges} fraction={frac:.6f}"


def test_train_and_wd_trace(config, tmp_path, capsys):
    assert cli.main(["train", "--config", str(config), "--epochs", "3", "--out", str(tmp_path / "t")]) == 0
    assert len((tmp_path / "t" / "train.csv").read_text().splitlines()) == 5
    assert cli.main(["wd-trace", "--config", str(config), "--epochs", "4", "--out", str(tmp_path / "w")]) == 0
    assert len((tmp_path / "w" / "wd_trace.csv").read_text().splitlines()) == 6


def test_report_pools_runs(config, tmp_path):
    for s in (1, 2):
        assert cli.main(["prune", "--config", str(config), "--method", "random", "--seed", str(s), "--out", str(tmp_path / "runs" / f"s{s}")]) == 0
    assert cli.main(["report", "--in", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep" / "comparison.csv").read_text().splitlines()
    assert lines[0].startswith("method,round,n,")
    assert all(line.split(",")[2] == "2" for line in lines[1:])


@pytest.mark.parametrize(
    "argv, code",
    [
        (["prune", "--set", "bogus_key=1"], cli.EXIT_CONFIG),
        (["prune", "--set", "p_g=150"], cli.EXIT_CONFIG),
        (["prune", "--dataset", "{tmp}/missing"], cli.EXIT_DATASET),
        (["prune", "--method", "lasso"], cli.EXIT_USAGE),
        (["frobnicate"], cli.EXIT_USAGE),
        (["report", "--in", "{tmp}/missing"], cli.EXIT_FAILED),
    ],
)
def test_error_codes(argv, code, tmp_path):
    argv = [a.format(tmp=tmp_path) for a in argv] + (["--out", str(tmp_path / "o")] if argv[0] == "prune" else [])
    try:
        rc = cli.main(argv)
    except SystemExit as exc:
        rc = exc.code
    assert rc == code


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"p_g": 5,\n "oops"}')
    assert cli.main(["prune", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    bad.write_text('{"sbm": {"blocks": [3]}}')
    assert cli.main(["prune", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_missing_dataset_file_named(tmp_path, small_graph, capsys):
    graphio.save_planetoid_dir(small_graph, tmp_path / "g")
    (tmp_path / "g" / "labels.csv").unlink()
    assert cli.main(["analyze-edges", "--dataset", str(tmp_path / "g")]) == cli.EXIT_DATASET
    assert "labels.csv" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("glt") is None, reason="console script not installed")
def test_console_script(config, tmp_path):
    res = subprocess.run(["glt", "analyze-edges", "--config", str(config)], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and res.stdout.startswith("related_edges=")


def test_report_does_not_create_missing_input(tmp_path):
    missing = tmp_path / "nope"
    assert cli.main(["report", "--in", str(missing)]) == cli.EXIT_FAILED
    assert not missing.exists()


def test_prune_on_incomplete_dataset_dir_is_dataset_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["prune", "--dataset", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATASET
