import numpy as np
import pytest

from experiments import ExperimentConfig
from patching import PatchConfig
from utils.cache_manager import cache_exists, get_cache_path, load_from_cache, make_cache_key, save_to_cache
from utils.config_checker import check_experiment_config
from utils.errors import ConfigError, SmallClusterError, StageError
from utils.settings import Settings, get_settings


def test_settings_come_from_the_environment(tmp_path):
    settings = get_settings()
    assert settings.cache_dir == tmp_path / "cache"
    assert settings.log_level == "WARNING"
    assert settings.use_cache is False
    assert not settings.progress_enabled


def test_settings_validation():
    assert Settings(log_level="debug").log_level == "DEBUG"
    with pytest.raises(ValueError):
        Settings(log_level="LOUD")
    with pytest.raises(ValueError):
        Settings(device="tpu")
    with pytest.raises(ValueError):
        Settings(num_threads=0)


def test_cache_roundtrip(tmp_path):
    key = make_cache_key(dataset="a", dim=3)
    assert make_cache_key(dim=3, dataset="a") == key
    assert load_from_cache(key) is None
    features = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = save_to_cache(key, {"features": features})
    assert path == get_cache_path(key)
    assert path.parent == tmp_path / "cache"
    assert cache_exists(key)
    np.testing.assert_array_equal(load_from_cache(key)["features"], features)
    assert path.with_suffix(".json").exists()


def test_valid_config_has_no_issues(scene_dir):
    assert check_experiment_config(ExperimentConfig(dataset=scene_dir)) == []


def test_config_checker_lists_every_issue(tmp_path):
    cfg = ExperimentConfig(
        dataset=tmp_path / "missing",
        model="unet",
        cae_epochs=5,
        patch=PatchConfig(mode="exclusive", n=2, pad_policy="none"),
        ensemble={"k": 2, "weights": [0.5, 0.5], "num_trials": 3},
        split={"num_trials": 2},
        parallel_trials=4,
    )
    issues = check_experiment_config(cfg)
    assert len(issues) == 6
    assert any("not found" in issue for issue in issues)


def test_error_payloads():
    error = ConfigError(["a", "b"])
    assert error.issues == ["a", "b"]
    assert str(error) == "a; b"
    cause = SmallClusterError([3, 1], 2)
    stage = StageError("clustering", cause)
    assert stage.stage == "clustering"
    assert stage.cause is cause
    assert cause.sizes == [3, 1]
