import json
import shutil
import subprocess
import sys

import pytest

from conftest import full_run, snapshot, write_run_config
from exposome_kit.cli import HELP, main

COMMANDS = sorted(HELP)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_top_level_help_via_module():
    out = subprocess.run([sys.executable, "-m", "exposome_kit.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert all(c in out for c in COMMANDS)


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["mine"], ["rate", "--config", "x",
                                                                  "--features", "colour"],
                                  ["analyze", "--config", "x", "--jobs", "0"]])
def test_bad_usage_exits_nonzero(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code != 0


def test_missing_config_is_exit_2(tmp_path, capsys):
    assert run("mine", "--config", tmp_path / "nope.toml") == 2
    assert "cannot read config" in capsys.readouterr().err


def test_missing_inputs_are_exit_2(tmp_path):
    cfg = write_run_config(tmp_path, corpus=False)
    assert run("analyze", "--config", cfg) == 2


def test_upstream_failure_is_exit_3(tmp_path, capsys):
    cfg = write_run_config(tmp_path, stub=False, endpoint="http://127.0.0.1:9", attempts=1, n=2)
    assert run("simulate", "--config", cfg) == 0
    assert run("rate", "--config", cfg) == 3
    assert "paused" in capsys.readouterr().err


def test_malformed_data_is_exit_3(tmp_path):
    cfg = write_run_config(tmp_path, n=3)
    assert run("simulate", "--config", cfg) == 0
    ema = tmp_path / "data" / "ema.csv"
    ema.write_text(ema.read_text().replace("T", "X", 2))
    assert run("analyze", "--config", cfg) == 3


def test_single_participant_is_exit_4(tmp_path, capsys):
    cfg = write_run_config(tmp_path, n=1)
    assert run("simulate", "--config", cfg) == 0
    assert run("rate", "--config", cfg) == 0
    assert run("analyze", "--config", cfg) == 4
    assert "degeneracy" in capsys.readouterr().err


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    return full_run(tmp_path_factory.mktemp("ref"))


def test_full_chain_outputs(reference_run):
    out = reference_run / "out"
    for name in ("literature/effects.json", "ratings/greenness/aggregates.csv",
                 "ratings/catalog/aggregates.csv", "analysis/models.md", "analysis/summary.json",
                 "analysis/fig_trait_pss.svg", "screening/screening.md", "simulation/truth.json"):
        assert (out / name).exists(), name
    assert len(json.loads((out / "literature/effects.json").read_text())) == 7
    ledger = (out / "literature/ledger.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in ledger] == [1, 2, 3, 4, 5, 6]


def test_rerun_is_byte_identical(reference_run, tmp_path):
    again = full_run(tmp_path / "again", jobs=3)
    assert snapshot(again) == snapshot(reference_run)


def test_seed_override_changes_simulation(reference_run, tmp_path):
    cfg = write_run_config(tmp_path, corpus=False)
    assert run("simulate", "--config", cfg, "--seed", 99) == 0
    assert (tmp_path / "data/ema.csv").read_bytes() != (reference_run / "data/ema.csv").read_bytes()


def test_pipeline_from_checkpoint(reference_run, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(reference_run, root)
    before = snapshot(root)
    assert run("cluster", "--config", root / "run.toml", "--from-checkpoint", "step4") == 0
    assert run("assemble", "--config", root / "run.toml") == 0
    assert snapshot(root) == before
    assert run("mine", "--config", root / "run.toml", "--from-checkpoint", "step3") == 2
