import json

import pytest

from sbprobe.config import (DEFAULT_CONFIG, cache_dir, config_digest, derive_seed, load_config, make_config,
                            validate_config)
from sbprobe.errors import ConfigurationError


def test_defaults_validate():
    validate_config(DEFAULT_CONFIG)
    cfg = make_config()
    assert cfg == DEFAULT_CONFIG and cfg is not DEFAULT_CONFIG
    assert cfg["quantize_enhanced"] is False


def test_overrides_merge_recursively():
    cfg = make_config({"splits": {"n_test_splits": 2}, "seed": 3})
    assert cfg["splits"]["n_test_splits"] == 2 and cfg["splits"]["train_fraction"] == 0.5
    assert cfg["seed"] == 3
    assert DEFAULT_CONFIG["splits"]["n_test_splits"] == 4


@pytest.mark.parametrize("bad", [
    {"unknown": 1},
    {"splits": {"n_test_splits": "four"}},
    {"privacy_model": "nope"},
    {"dataset": {"positive_class": "x"}},
    {"probers": ["PP-D", "PP-D"]},
    {"seed": -1},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigurationError):
        make_config(bad)


def test_yaml_file_with_relative_manifest(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "exp.yaml"
    p.write_text("seed: 7\ndataset:\n  manifest: data/manifest.csv\nprivacy_model: san\n")
    cfg = load_config(p, {"workers": 2})
    assert cfg["dataset"]["manifest"] == str(tmp_path / "sub" / "data" / "manifest.csv")
    assert cfg["seed"] == 7 and cfg["privacy_model"] == "san" and cfg["workers"] == 2


def test_json_file_is_accepted(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps({"splits": {"nonmated_cap": 10}}))
    assert load_config(p)["splits"]["nonmated_cap"] == 10


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigurationError):
        load_config(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "splits") == derive_seed(0, "splits")
    seeds = {derive_seed(r, n) for r in range(5) for n in ("splits", "autoencoder", "privacy:san")}
    assert len(seeds) == 15
    assert all(0 <= s < 2**32 for s in seeds)


def test_config_digest_ignores_key_order():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_cache_dir_env(tmp_path, monkeypatch):
    monkeypatch.delenv("SBPROBE_CACHE_DIR", raising=False)
    assert cache_dir() is None
    monkeypatch.setenv("SBPROBE_CACHE_DIR", str(tmp_path / "c"))
    assert cache_dir() == tmp_path / "c" and (tmp_path / "c").is_dir()
