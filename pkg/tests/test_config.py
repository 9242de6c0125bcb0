"""Key=value config parsing and assembly into typed configs."""

import pytest

from freespace.config import (DEFAULTS, TrainConfig, merged, parse_override,
                              parse_value, read_config_file,
                              train_config_from_mapping)
from freespace.errors import ContractError


def test_value_typing():
    assert parse_value("true") is True
    assert parse_value("False") is False
    assert parse_value("12") == 12
    assert parse_value("0.25") == 0.25
    assert parse_value("16,32,64") == (16, 32, 64)
    assert parse_value("roadsegv2") == "roadsegv2"


def test_override_parsing():
    assert parse_override("loss.radius=5") == ("loss.radius", 5)
    with pytest.raises(ContractError):
        parse_override("loss.radius")
    with pytest.raises(ContractError):
        parse_override("made.up.key=1")


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("""
# comment line
train.lr = 0.01
fusion.baseline_sum = true   # inline comment
model.channels = 8,16
""")
    values = read_config_file(path)
    assert values == {"train.lr": 0.01, "fusion.baseline_sum": True,
                      "model.channels": (8, 16)}


def test_bad_config_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("just words\n")
    with pytest.raises(ContractError):
        read_config_file(path)


def test_merged_precedence():
    m = merged({"train.lr": 0.5}, {"train.lr": 0.25})
    assert m["train.lr"] == 0.25
    assert m["loss.radius"] == DEFAULTS["loss.radius"]


def test_train_config_assembly():
    cfg = train_config_from_mapping({
        "train.seed": 3, "model.levels": 2, "model.channels": (4, 8),
        "decoder.kind": "unetpp", "ham.atrous": False, "loss.lambda_d": 0.0,
    })
    assert cfg.seed == 3
    assert cfg.model.levels == 2 and cfg.model.channels == (4, 8)
    assert cfg.model.decoder_kind == "unetpp"
    assert cfg.model.fusion.atrous is False
    assert cfg.loss.lambda_d == 0.0
    assert cfg.model.seed == 3  # training seed drives initialization


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractError):
        TrainConfig(patience=0)
    with pytest.raises(ContractError):
        TrainConfig(val_fraction=1.5)


def test_single_channel_value_becomes_tuple():
    cfg = train_config_from_mapping({"model.levels": 2, "model.channels": (4, 8)})
    assert cfg.model.channels == (4, 8)
