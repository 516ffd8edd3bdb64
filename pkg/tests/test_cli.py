import json

import pytest

from keytrain.cli import main

CONFIG = """\
array: {cols: 4}
users:
  - clusters: [{azimuth: -30}]
  - clusters: [{azimuth: 40}]
dl_snr_db_list: [0, 10]
m_list: [4, 8]
mc_samples: 10000
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(CONFIG)
    return p


@pytest.mark.parametrize("command, csv_name", [
    ("sweep", "sweep.csv"), ("pilots", "sweep.csv"),
    ("converge", "convergence.csv"), ("validate", "validate.csv"),
])
def test_subcommands_succeed(tmp_path, config, command, csv_name):
    assert main([command, "--config", str(config), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / csv_name).exists()
    assert (tmp_path / "out" / "manifest.json").exists()


def test_seed_override(tmp_path, config):
    main(["sweep", "--config", str(config), "--out", str(tmp_path / "a"), "--seed", "5"])
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seed"] == 5
    assert ",5\n" in (tmp_path / "a" / "sweep.csv").read_text()


def test_jobs_flag(tmp_path, config):
    main(["sweep", "--config", str(config), "--out", str(tmp_path / "a")])
    main(["sweep", "--config", str(config), "--out", str(tmp_path / "b"), "--jobs", "2"])
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_bad_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("users: []\ndl_snr_db_list: [0]\n")
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "field 'users'" in capsys.readouterr().err


def test_missing_config_exits_nonzero(tmp_path):
    assert main(["sweep", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) != 0


def test_unwritable_output_exits_nonzero(tmp_path, config):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["sweep", "--config", str(config), "--out", str(blocker / "sub")]) != 0


def test_converge_rejects_single_user(tmp_path):
    p = tmp_path / "one.yaml"
    p.write_text("users: [{clusters: [{azimuth: 0}]}]\ndl_snr_db_list: [0]\n")
    assert main(["converge", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["sweep"])
    assert exc.value.code == 2
