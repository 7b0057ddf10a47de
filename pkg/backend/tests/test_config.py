import pytest

from core.config import config_from_dict, config_hash, dump_config, load_config, merge_dicts
from core.errors import ConfigValidationError
from tests.conftest import tiny_config_dict


def _error_key(data):
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(data)
    return info.value.key


def test_presets():
    desk = load_config(preset="desk", use_env=False)
    paper = load_config(preset="paper", use_env=False)
    assert desk.preset == "desk" and desk.generator.num_samples == 500
    assert paper.generator.num_samples == 10000
    assert desk.rollout.slot_dim == desk.encoder.slot_dim
    assert desk.encoder.image_size == (desk.generator.height, desk.generator.width)
    assert desk.generator.engine == desk.engine
    with pytest.raises(ConfigValidationError) as info:
        load_config(preset="laptop")
    assert info.value.key == "preset"


def test_unknown_key():
    data = tiny_config_dict()
    data["engine"]["bogus"] = 1
    assert _error_key(data) == "engine.bogus"


def test_unknown_section():
    data = tiny_config_dict()
    data["optimizer"] = {"lr": 1.0}
    assert _error_key(data) == "optimizer"


def test_derived_key_is_rejected():
    data = tiny_config_dict()
    data["rollout"]["slot_dim"] = 32
    assert _error_key(data) == "rollout.slot_dim"


@pytest.mark.parametrize(
    "section,key,value",
    [("engine", "substeps", "six"), ("train", "use_flow_loss", 1), ("paths", "device", 3), ("train", "batch_size", 2.5)],
)
def test_type_mismatch(section, key, value):
    data = tiny_config_dict()
    data.setdefault(section, {})[key] = value
    assert _error_key(data) == f"{section}.{key}"


def test_cross_section_constraints():
    data = tiny_config_dict()
    data["generator"]["k_max"] = 5
    assert _error_key(data) == "generator.k_max"
    data = tiny_config_dict()
    data["generator"]["num_frames"] = 6
    assert _error_key(data) == "generator.num_frames"


def test_whole_float_accepted_for_int():
    data = tiny_config_dict()
    data["train"]["batch_size"] = 4.0
    assert config_from_dict(data).train.batch_size == 4


def test_hash_is_deterministic_and_sensitive():
    a = config_from_dict(tiny_config_dict())
    b = config_from_dict(tiny_config_dict())
    assert config_hash(a) == config_hash(b)
    data = tiny_config_dict()
    data["train"]["lr"] = 3e-4
    assert config_hash(config_from_dict(data)) != config_hash(a)
    assert config_hash(a, sections=("engine",)) == config_hash(config_from_dict(data), sections=("engine",))


def test_dump_and_reload(tmp_path, lab_config):
    path = dump_config(lab_config, tmp_path / "resolved.toml")
    reloaded = load_config(path, use_env=False)
    assert config_hash(reloaded) == config_hash(lab_config)
    assert reloaded.rollout.transformer == lab_config.rollout.transformer


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("LAB_RUNS_DIR", str(tmp_path / "elsewhere"))
    monkeypatch.setenv("LAB_DEVICE", "cpu")
    monkeypatch.setenv("LAB_NUM_WORKERS", "3")
    config = load_config(preset="desk")
    assert config.paths.runs_path == tmp_path / "elsewhere"
    assert config.paths.device == "cpu" and config.paths.num_workers == 3
    assert load_config(preset="desk", use_env=False).paths.device == "auto"
    # explicit overrides beat the environment
    assert load_config(preset="desk", overrides={"paths": {"device": "mps"}}).paths.device == "mps"


def test_bad_worker_count_in_environment(monkeypatch):
    monkeypatch.setenv("LAB_NUM_WORKERS", "many")
    with pytest.raises(ConfigValidationError) as info:
        load_config(preset="desk")
    assert info.value.key == "paths.num_workers"


def test_seed_override():
    config = load_config(preset="desk", seed=7, use_env=False)
    assert config.generator.seed == config.savi_train.seed == config.train.seed == 7


def test_missing_file(tmp_path):
    with pytest.raises(ConfigValidationError) as info:
        load_config(tmp_path / "nope.toml")
    assert info.value.key == "config"


def test_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[engine\nsubsteps = 3\n")
    with pytest.raises(ConfigValidationError):
        load_config(path, use_env=False)


def test_merge_dicts():
    base = {"a": {"x": 1, "y": 2}, "b": [1, 2]}
    merged = merge_dicts(base, {"a": {"y": 3}, "b": [9]})
    assert merged == {"a": {"x": 1, "y": 3}, "b": [9]}
    assert base["a"]["y"] == 2
