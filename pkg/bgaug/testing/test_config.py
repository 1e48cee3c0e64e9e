import json

import pytest

from bgaug.config import WORKERS_ENV, ExperimentConfig, resolve_workers
from bgaug.errors import ConfigError
from bgaug.imgcore import MaskCorruption


def test_defaults_valid():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.train.aug is cfg.aug
    assert len(cfg.eval.attacks) == 8


def test_json_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=4)
    cfg.aug.mode = "bg_swaps"
    cfg.aug.corruption = MaskCorruption(max_rotation=10.0)
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    loaded = ExperimentConfig.from_json(path)
    assert loaded == cfg
    assert loaded.train.aug is loaded.aug
    assert "aug" not in json.loads(cfg.to_json())["train"]


def test_partial_config_takes_defaults():
    cfg = ExperimentConfig.from_dict({"aug": {"mode": "bg_rm"}, "synth": {"n_train": 40}})
    assert cfg.aug.mode == "bg_rm"
    assert cfg.aug.p_remove == 0.2
    assert cfg.synth.n_train == 40
    assert cfg.train.aug.mode == "bg_rm"


def test_seed_overrides_sections():
    cfg = ExperimentConfig.from_dict({"seed": 9, "synth": {"seed": 1}})
    assert cfg.synth.seed == 9 and cfg.train.seed == 9


@pytest.mark.parametrize(
    "data, message",
    [
        ({"aug": {"p_poss": 0.1}}, "unknown key 'aug.p_poss'"),
        ({"extra": 1}, "unknown key 'extra'"),
        ({"aug": {"corruption": {"max_rot": 1}}}, "unknown key 'aug.corruption.max_rot'"),
        ({"train": {"aug": {}}}, "train.aug"),
        ({"synth": {"n_train": "10"}}, "synth.n_train must be an integer"),
        ({"aug": {"aug_in_key": 1}}, "aug.aug_in_key must be true or false"),
        ({"aug": {"mode": "swaps"}}, "aug.mode"),
        ({"train": {"batch_size": 6, "queue_size": 16}}, "queue_size"),
        ({"schema_version": 2}, "schema_version"),
        ({"eval": {"splits": ["Mixed-Rnd"]}}, "unknown split"),
        ({"eval": {"donor_key": "label"}}, "eval.donor_key"),
        ({"aug": {"scale": ["x", 1.0]}}, r"aug.scale\[0\] must be a number"),
        ({"aug": {"ratio": [1.0]}}, "aug.ratio must have 2 entries"),
        ({"train": {"widths": [4, 8.5]}}, r"train.widths\[1\] must be an integer"),
    ],
)
def test_invalid_configs(data, message):
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig.from_dict(data)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        ExperimentConfig.from_json(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ExperimentConfig.from_json(tmp_path / "broken.json")


def test_resolve_workers(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers() == 1
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(ConfigError):
        resolve_workers()
    with pytest.raises(ConfigError):
        resolve_workers(0)
