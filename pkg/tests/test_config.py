import pytest

from bevfuse.config import ConfigError, ExperimentConfig, dump_config, from_dict, load_config


def test_default_file_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
    assert load_config(path) == ExperimentConfig()


def test_dump_load_roundtrip(tmp_path):
    cfg = ExperimentConfig().replace(**{"fusion.afs_enabled": False, "malfunction.fov": [-1.5, 1.5]})
    (tmp_path / "c.toml").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.toml") == cfg


def test_empty_file_is_default(tmp_path):
    (tmp_path / "e.toml").write_text("")
    assert load_config(tmp_path / "e.toml") == ExperimentConfig()


@pytest.mark.parametrize("text", ["sed = 7\n", "[grid]\ncell = 1.0\n", "[grids]\ncell_xy = 1.0\n"])
def test_unknown_keys_rejected(tmp_path, text):
    (tmp_path / "c.toml").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.toml")


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as e:
        from_dict({"streams": "radar", "cameras": {"front_index": 9}, "train": {"freeze": ["wheels"]}})
    msg = str(e.value)
    assert "streams" in msg and "front_index" in msg and "freeze" in msg


def test_bad_toml_is_config_error(tmp_path):
    (tmp_path / "c.toml").write_text("seed = = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.toml")


def test_hash_is_stable_and_sensitive():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.replace(seed=8).config_hash()
    with pytest.raises(ConfigError):
        a.replace(**{"fusion.afs": False})
