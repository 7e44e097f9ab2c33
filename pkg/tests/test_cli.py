"""Command line and configuration files."""

import csv
import json

import numpy as np
import pytest

from fedcodec import capture
from fedcodec.cli import main, merge_transcripts
from fedcodec.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config

FED = {"n_clients": 3, "rounds": 2, "d": 8, "n_layers": 1, "rank": 2, "n_classes": 3, "n_samples": 300, "n_test": 60}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"fed": FED, "codec": {"spec": {"family": "resnet2d", "channels": [2, 2], "n_res_blocks": 1}, "epochs": 3, "lr": 1e-3}}))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config


def test_default_config_and_round_trip():
    cfg = load_config(None)
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.fed.aggregation == "mean"
    assert parse_config(json.loads(dump_config(cfg))).to_dict() == cfg.to_dict()
    assert parse_config({"desk": False}).fed.aggregation == "sum"


@pytest.mark.parametrize(
    "raw,word",
    [
        ({"bogus": 1}, "bogus"),
        ({"fed": {"roundz": 3}}, "roundz"),
        ({"fed": {"privacy": {"sigmaa": 1}}}, "sigmaa"),
        ({"codec": {"epoch": 3}}, "epoch"),
        ({"fed": {"fraction": 3.0}}, "fraction"),
    ],
)
def test_config_errors_name_the_key(raw, word):
    with pytest.raises(ConfigError, match=word):
        parse_config(raw)


def test_privacy_section_is_parsed():
    cfg = parse_config({"fed": {"privacy": {"sigma": 2.5, "clip": 0.5}}})
    assert cfg.fed.privacy.sigma == 2.5 and cfg.fed.privacy.clip == 0.5


# --------------------------------------------------------------- commands


def test_capture_then_train_then_fedrun_then_report(tmp_path, cfg_path, capsys):
    snap = tmp_path / "snap.cgfg"
    assert main(["capture", "--config", str(cfg_path), "--out", str(snap), "--stats", str(tmp_path / "st.csv")]) == 0
    store = capture.read_store(snap)
    assert len(store) == 6  # 3 clients x 2 rounds
    assert len(read_csv(tmp_path / "st.csv")) == 2
    first = snap.read_bytes()
    assert main(["capture", "--config", str(cfg_path), "--out", str(snap)]) == 0
    assert snap.read_bytes() == first

    ck = tmp_path / "codec.cgfg"
    assert main(["train-codec", "--config", str(cfg_path), "--snapshots", str(snap), "--out", str(ck)]) == 0
    loss = read_csv(tmp_path / "codec.loss.csv")
    assert len(loss) == 3 and list(loss[0]) == ["epoch", "train_mse", "test_mse"]

    assert main(["fedrun", "--config", str(cfg_path), "--out-dir", str(tmp_path / "ident")]) == 0
    assert main(["fedrun", "--config", str(cfg_path), "--codec", str(ck), "--out-dir", str(tmp_path / "comp")]) == 0
    a = read_csv(tmp_path / "ident" / "transcript.csv")
    b = read_csv(tmp_path / "comp" / "transcript.csv")
    assert len(a) == len(b) == 2
    assert list(a[0]) == list(b[0])
    man = json.loads((tmp_path / "comp" / "manifest.json").read_text())
    assert man["experiment"]["fed"]["codec"] == str(ck)
    assert (tmp_path / "comp" / "model.cgfg").exists()

    # rerun reproduces the transcript byte for byte
    assert main(["fedrun", "--config", str(cfg_path), "--codec", str(ck), "--out-dir", str(tmp_path / "comp2")]) == 0
    assert (tmp_path / "comp2" / "transcript.csv").read_bytes() == (tmp_path / "comp" / "transcript.csv").read_bytes()

    out = tmp_path / "report.csv"
    assert main(["report", str(tmp_path / "ident" / "transcript.csv"), str(tmp_path / "comp" / "transcript.csv"), "--out", str(out)]) == 0
    rep = read_csv(out)
    assert [r["round"] for r in rep] == ["0", "1"]
    from fedcodec.codec import AutoEncoderCodec, compression_ratio

    cr = compression_ratio(AutoEncoderCodec.load(ck).spec_)
    assert float(rep[0]["comp:bytes_saved"]) == 1 - cr
    assert float(rep[0]["ident:bytes_saved"]) == 0.0


def test_dp_calculator_paths(tmp_path, capsys):
    assert main(["dp", "--p", "0.05", "--rounds", "20"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "epsilon,p,T,sigma,mu,delta"
    assert [float(line.split(",")[0]) for line in lines[1:]] == [0.25, 2.0, 8.0]
    sigma = float(lines[1].split(",")[3])
    assert main(["dp", "--epsilon", "0.25", "--p", "0.05", "--rounds", "20", "--sigma", repr(sigma)]) == 0
    row = capsys.readouterr().out.strip().splitlines()[1].split(",")
    assert float(row[5]) == pytest.approx(1e-5, abs=1e-9)


@pytest.mark.parametrize(
    "argv",
    [
        ["dp", "--delta", "1.0"],
        ["report"],
        ["fedrun", "--codec", "/nonexistent.cgfg", "--out-dir", "/tmp/x_fedcodec"],
        ["capture"],
        ["frobnicate"],
        ["--threads", "0", "dp"],
    ],
)
def test_user_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_key_named_on_stderr(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"fed": {"bogus_key": 1}}')
    assert main(["capture", "--config", str(p), "--out", str(tmp_path / "x")]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_internal_error_exit_2(monkeypatch, capsys):
    import fedcodec.cli as cli

    def boom(args):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_dp", boom)
    parser = cli.build_parser()
    monkeypatch.setattr(cli, "build_parser", lambda: _rebind(parser, boom))
    assert cli.main(["dp"]) == 2


def _rebind(parser, fn):
    for action in parser._subparsers._group_actions:
        action.choices["dp"].set_defaults(func=fn)
    return parser


def test_merge_transcripts_requires_input():
    from fedcodec.cli import UsageError

    with pytest.raises(UsageError):
        merge_transcripts([])
