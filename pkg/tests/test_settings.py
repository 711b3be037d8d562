import json

import pytest

from core.errors import ArgumentError, ConfigError, MissingArtifactError
from core.path_utils import get_run_paths, require_artifact
from core.settings import STAGES, SettingsManager, load_run_config, parse_value, stage_seed


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_are_valid():
    config = load_run_config()
    assert config.model.num_routing_experts == 16
    assert config.pretrain.learning_rate == 3e-3
    assert config.sft.learning_rate == 1e-4
    assert config.calibration_count == 100
    assert config.pretrain.seed == stage_seed(0, "pretrain")


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("0.5") == 0.5
    assert parse_value("true") is True
    assert parse_value("runs/a") == "runs/a"
    assert parse_value('"js"') == "js"


def test_flat_config_file(tmp_path):
    path = _write(
        tmp_path,
        "run.conf",
        "# tiny run\n"
        "model.num_blocks = 3\n"
        "selection.metric = kl   # inline comment\n"
        "selection.allow_inactive_experts = true\n"
        "run.out = runs/tiny\n",
    )
    config = load_run_config(path)
    assert config.model.num_blocks == 3
    assert config.metric == "kl"
    assert config.allow_inactive_experts is True
    assert config.out == "runs/tiny"


def test_json_config_file(tmp_path):
    path = _write(tmp_path, "run.json", json.dumps({"sft": {"steps": 7}, "run": {"seed": 4}}))
    config = load_run_config(path)
    assert config.sft.steps == 7
    assert config.sft.seed == stage_seed(4, "sft")


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = _write(tmp_path, "run.conf", "selection.k_layers = 3\n")
    config = load_run_config(path, {"selection.k_layers": 1, "selection.metric": None})
    assert config.k_layers == 1
    assert config.metric == "js"


def test_problems_are_reported_together(tmp_path):
    path = _write(
        tmp_path,
        "run.conf",
        "selection.k_layers = 99\nselection.metric = l2\nmodel.hidden = 4\nnot a pair\n",
    )
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    text = str(info.value)
    assert len(info.value.problems) == 4
    for fragment in ("selection.k_layers", "selection.metric", "model.hidden", "key = value"):
        assert fragment in text


def test_type_and_choice_errors():
    with pytest.raises(ConfigError) as info:
        load_run_config(
            overrides={
                "pretrain.steps": "many",
                "selection.layer_method": "layer_rank",
                "selection.metric": "ppl",
            }
        )
    assert len(info.value.problems) == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_run_config(tmp_path / "absent.conf")


def test_save_settings_round_trip(tmp_path):
    settings = SettingsManager()
    settings.set("data.corpus_size", 12)
    assert settings.save_settings(tmp_path / "saved.json")
    assert SettingsManager(tmp_path / "saved.json").get("data.corpus_size") == 12


def test_stage_seeds():
    seeds = [stage_seed(0, stage) for stage in STAGES]
    assert len(set(seeds)) == len(STAGES)
    assert stage_seed(0, "data") == stage_seed(0, "data")
    assert stage_seed(0, "data") != stage_seed(1, "data")
    assert all(0 <= seed < 2**63 for seed in seeds)
    with pytest.raises(ArgumentError):
        stage_seed(0, "warmup")


def test_fingerprint_ignores_output_directory():
    a = load_run_config(overrides={"run.out": "runs/a"})
    b = load_run_config(overrides={"run.out": "runs/b"})
    c = load_run_config(overrides={"run.seed": 1})
    assert a.fingerprint == b.fingerprint
    assert a.fingerprint != c.fingerprint


def test_run_paths(tmp_path):
    paths = get_run_paths(tmp_path)
    assert paths.finetuned == tmp_path / "checkpoints" / "sft"
    assert paths.evaluation("condensed") == tmp_path / "eval" / "condensed.json"
    with pytest.raises(MissingArtifactError, match="run 'pretrain' first"):
        require_artifact(paths.pretrained, "pretrain")
