import json

import pytest

from tempo.blocks import DESK_MODEL, PAPER_MODEL
from tempo.config import load_config_file, parse_override, resolve
from tempo.errors import ContractError


def test_desk_defaults():
    cfg = resolve()
    assert cfg.profile == "desk" and cfg.model == DESK_MODEL
    assert cfg.train.lr0 == 1e-3 and cfg.train.max_steps == 5000
    assert (cfg.scene.K, cfg.scene.P, cfg.scene.D, cfg.scene.noise_sigma) == (6, 8, 32, 0.05)
    assert (cfg.data.n_train, cfg.data.n_test) == (2000, 200)


def test_paper_profile_keeps_reference_optimizer():
    cfg = resolve(profile="paper")
    assert cfg.model == PAPER_MODEL
    assert cfg.train.lr0 == 2.5e-5 and cfg.train.weight_decay == 1e-4
    assert cfg.bench.n_list == (4, 6, 8)


def test_precedence_flag_over_file_over_default():
    file_data = {"profile": "desk", "seed": 5, "train": {"epochs": 2, "batch_size": 4}}
    cfg = resolve(file_data)
    assert cfg.seed == 5 and cfg.train.epochs == 2 and cfg.train.batch_size == 4 and cfg.train.lr0 == 1e-3
    cfg = resolve(file_data, seed=9, overrides=[parse_override("train.epochs=3")])
    assert cfg.seed == 9 and cfg.train.epochs == 3 and cfg.train.batch_size == 4
    assert cfg.train.seed == 9 and cfg.scene.seed == 9


def test_profile_flag_beats_file():
    assert resolve({"profile": "desk"}, profile="paper").profile == "paper"


def test_rejects_unknown_fields_and_mismatched_widths():
    with pytest.raises(ContractError):
        resolve({"model": {"width": 3}})
    with pytest.raises(ContractError):
        resolve({"optimizer": {}})
    with pytest.raises(ContractError):
        resolve({"scene": {"D": 16}})
    with pytest.raises(ContractError, match="P >= K"):
        resolve({"scene": {"K": 9}})
    with pytest.raises(ContractError):
        resolve(seed=-1)


def test_parse_override_types():
    assert parse_override("train.lr0=0.01") == {"train": {"lr0": 0.01}}
    assert parse_override("bench.n_list=[2,4,8]") == {"bench": {"n_list": [2, 4, 8]}}
    assert parse_override("profile=paper") == {"profile": "paper"}
    with pytest.raises(ContractError):
        parse_override("nothing")


def test_resolved_roundtrip(tmp_path):
    cfg = resolve(seed=4, overrides=[parse_override("data.n_train=10")])
    path = cfg.write(tmp_path)
    data = json.loads(path.read_text())
    assert resolve(data) == cfg


def test_bad_config_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ContractError):
        load_config_file(tmp_path / "c.json")
    with pytest.raises(ContractError):
        load_config_file(tmp_path / "missing.json")
