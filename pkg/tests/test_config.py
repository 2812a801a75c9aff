import pytest
import yaml

from ichseq.config import (
    RunConfig,
    apply_overrides,
    build_run_config,
    load_run_config,
    resolved_dict,
    save_resolved,
)
from ichseq.errors import ConfigError


def test_defaults():
    cfg = build_run_config({})
    assert cfg.model.backbone == "resnet50"
    assert cfg.model.feature_dim == 2048
    assert cfg.model.lstm_hidden == 512
    assert cfg.model.lstm_layers == 2
    assert cfg.model.input_size == (512, 512)
    assert cfg.train.epochs == 30
    assert cfg.train.peak_lr == 1e-3
    assert cfg.train.batch_size_scans == 4
    assert cfg.train.warmup_steps is None
    assert (cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps) == (0.9, 0.999, 1e-8)
    assert cfg.augment.cutmix_alpha == 1.0 and cfg.augment.cutmix_prob == 0.5
    assert [(w.level, w.width) for w in cfg.windows.channels] == [
        (40.0, 80.0),
        (75.0, 215.0),
        (600.0, 2800.0),
    ]


def test_sections_parse_and_tuplify():
    cfg = build_run_config(
        {
            "model": {"backbone": "tiny", "feature_dim": 8, "input_size": [32, 48]},
            "augment": {"crop_scale_range": [0.9, 1.0]},
            "windows": [[0, 100], [50, 100], [100, 200]],
        }
    )
    assert cfg.model.input_size == (32, 48)
    assert cfg.augment.crop_scale_range == (0.9, 1.0)
    assert cfg.windows.channels[2].level == 100.0


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="model"):
        build_run_config({"model": {"depth": 5}})
    with pytest.raises(ConfigError, match="top-level"):
        build_run_config({"optimizer": {}})


def test_load_run_config_and_errors(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  epochs: 3\n  seed: 7\n")
    cfg = load_run_config(path)
    assert cfg.train.epochs == 3 and cfg.train.seed == 7
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(scalar)


def test_apply_overrides():
    raw = {"train": {"epochs": 3}}
    out = apply_overrides(raw, ["train.peak_lr=0.01", "model.backbone=tiny", "train.warmup_steps=5"])
    assert out["train"]["peak_lr"] == 0.01
    assert out["train"]["epochs"] == 3  # untouched
    assert out["model"]["backbone"] == "tiny"
    assert raw == {"train": {"epochs": 3}}  # input not mutated
    with pytest.raises(ConfigError, match="unknown key path"):
        apply_overrides(raw, ["train.momentum=0.9"])
    with pytest.raises(ConfigError, match="key.path=value"):
        apply_overrides(raw, ["train.epochs"])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        build_run_config({"train": {"epochs": 0}})
    with pytest.raises(ConfigError):
        build_run_config({"train": {"peak_lr": 0}})
    with pytest.raises(ConfigError):
        build_run_config({"train": {"warmup_steps": -1}})
    with pytest.raises(ConfigError):
        build_run_config({"train": {"batch_size_scans": 0}})


def test_resolved_round_trip(tmp_path):
    cfg = build_run_config({"model": {"backbone": "tiny", "feature_dim": 8}, "train": {"epochs": 2}})
    resolved = resolved_dict(cfg)
    again = build_run_config(resolved)
    assert resolved_dict(again) == resolved
    assert isinstance(again, RunConfig)
    path = tmp_path / "config.resolved"
    save_resolved(path, cfg)
    from_disk = yaml.safe_load(path.read_text())
    assert from_disk == resolved
    assert from_disk["windows"] == [[40.0, 80.0], [75.0, 215.0], [600.0, 2800.0]]
    assert from_disk["train"]["epochs"] == 2
