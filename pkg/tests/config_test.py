import pytest

from triflow.config import Settings, dump_config, load_config, parse_assignment, parse_config_text
from triflow.errors import ConfigError
from triflow.models import TrainConfig


def test_defaults_without_file():
    config = load_config()
    assert config == TrainConfig()
    assert config.iters == 12 and config.gamma == 0.85


def test_file_then_overrides_then_seed(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\niters = 4\nmodel.hidden_dim=16\nseed=1\n\nablation.mop=false  # off\n")
    config = load_config(path, ["iters=6", "data.channels=1"], seed=3)
    assert config.iters == 6
    assert config.model.hidden_dim == 16
    assert config.data.channels == 1
    assert config.seed == 3
    assert config.ablation.mop is False


def test_dump_and_parse_round_trip():
    config = load_config(overrides=["gamma=0.8", "model.corr_radius=2", "include_initial=true"])
    text = dump_config(config)
    assert "gamma=0.8\n" in text
    assert text.splitlines() == sorted(text.splitlines())
    assert parse_config_text(text) == config


def test_malformed_line_names_file_and_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("iters=2\nnot an assignment\n")
    with pytest.raises(ConfigError, match="bad.cfg:2"):
        load_config(path)


@pytest.mark.parametrize(
    "override, token",
    [("model.unknown=1", "unknown"), ("gamma=1.5", "gamma"), ("iters=zero", "iters"), ("data.channels=2", "channels")],
)
def test_invalid_values_name_the_key(override, token):
    with pytest.raises(ConfigError, match=token):
        load_config(overrides=[override])


def test_section_conflicts():
    with pytest.raises(ConfigError):
        load_config(overrides=["model=3", "model.hidden_dim=4"])


def test_parse_assignment():
    assert parse_assignment(" a.b = c ") == ("a.b", "c")
    with pytest.raises(ConfigError):
        parse_assignment("=value")


def test_settings_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TRIFLOW_HOME", str(tmp_path / "home"))
    monkeypatch.setenv("TRIFLOW_THREADS", "4")
    settings = Settings()
    assert settings.threads == 4
    assert settings.home.is_dir()
    assert settings.data_dir == tmp_path / "home" / "data"
