import json

import pytest

from rgal.cli import main
from rgal.config import ConfigError, parse_config, serialize_config


def test_run_rgal_needs_teacher_checkpoint():
    with pytest.raises(ConfigError, match="missing teacher checkpoint"):
        parse_config("")


def test_defaults():
    cfg = parse_config("", {"experiment.task": "pretrain_teacher"})
    assert cfg.sampling.lambda_clip == 0.5
    assert cfg.train.batch_size == 64 and cfg.train.lr_g == 0.1


def test_round_trip():
    cfg = parse_config("[train]\nepochs = 7\n[sampling]\nlambda_l = 0.25\n[teacher]\nhidden = 8, 4\n",
                       {"experiment.teacher_checkpoint": "t.rgal", "loss.beta": "0.5"})
    assert cfg.train.epochs == 7 and cfg.teacher.hidden == (8, 4) and cfg.loss.beta == 0.5
    assert parse_config(serialize_config(cfg)) == cfg


@pytest.mark.parametrize("text, key", [
    ("[train]\nepochz = 3\n", "train.epochz"),
    ("[trian]\nepochs = 3\n", "[trian]"),
])
def test_unknown_keys_are_named(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text, {"experiment.task": "pretrain_teacher"})
    assert key in str(err.value)


def test_bad_values():
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config("[train]\nepochs = many\n", {"experiment.task": "pretrain_teacher"})
    with pytest.raises(ConfigError, match="batch_size"):
        parse_config("[train]\nbatch_size = 63\n", {"experiment.task": "pretrain_teacher"})


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    assert main(["pretrain", "--out", str(out), "--seed", "0"]) == 0
    return out


def test_cli_pretrain(pretrained):
    summary = json.loads((pretrained / "summary.json").read_text())
    assert (pretrained / "teacher.rgal").exists()
    assert summary["schema_version"] == 1 and summary["task"] == "pretrain_teacher"
    assert summary["accuracy"] >= 0.98


def distill(pretrained, out):
    return main(["distill", "--out", str(out), "--seed", "3",
                 "--set", f"experiment.teacher_checkpoint={pretrained / 'teacher.rgal'}",
                 "--set", "train.epochs=1"])


def test_cli_distill_one_epoch(pretrained, tmp_path):
    assert distill(pretrained, tmp_path / "a") == 0
    assert distill(pretrained, tmp_path / "b") == 0
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert len(text.strip().splitlines()) == 2  # header + one epoch
    assert (tmp_path / "b" / "metrics.csv").read_text() == text
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["epochs"] == 1


def test_cli_eval_and_export(pretrained, tmp_path):
    assert distill(pretrained, tmp_path) == 0
    common = ["--set", f"experiment.teacher_checkpoint={pretrained / 'teacher.rgal'}",
              "--set", f"experiment.student_checkpoint={tmp_path / 'student.rgal'}"]
    assert main(["eval", "--out", str(tmp_path / "e"), *common]) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert 0 <= summary["agreement"] <= 1
    assert main(["export", "--out", str(tmp_path / "x"), *common,
                 "--set", f"experiment.dataset_csv={pretrained / 'train.csv'}"]) == 0
    assert len((tmp_path / "x" / "embeddings.csv").read_text().splitlines()) == 301


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["distill", "--out", str(tmp_path)]) != 0
    assert main(["pretrain", "--set", "train.nope=1"]) != 0
    assert main(["distill", "--out", str(tmp_path), "--set", "experiment.teacher_checkpoint=/no/such"]) != 0
    assert main(["pretrain", "--seed", "-1"]) != 0
    assert "rgal:" in capsys.readouterr().err
