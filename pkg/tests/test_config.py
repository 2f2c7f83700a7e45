import pytest

from rankforge.config import RunConfig, load_config, parse_config_text
from rankforge.errors import ConfigError, ParseError


def test_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy\nepochs = 3\nseed = 5  # from file\nlr_head = 0.5\n")
    cfg = load_config(path, {"lr_head": "0.25"}, env={"RANKFORGE_SEED": "9"})
    assert (cfg.epochs, cfg.seed, cfg.lr_head) == (3, 5, 0.25)
    assert cfg.sources["lr_head"] == "command line"
    assert load_config(None, env={"RANKFORGE_SEED": "9"}).seed == 9
    assert load_config(None, env={}).seed == 0


def test_unknown_key_and_bad_value(tmp_path):
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(None, {"optimizer": "adam"}, env={})
    with pytest.raises(ConfigError, match="epochs"):
        load_config(None, {"epochs": "many"}, env={})
    with pytest.raises(ParseError):
        parse_config_text("just words\n")


def test_resolved_dump_round_trips(tmp_path):
    cfg = load_config(None, {"hidden": "16", "corpus": "c.jsonl"}, env={})
    path = tmp_path / "config.resolved"
    path.write_text(cfg.dumps())
    assert load_config(path, env={}).as_dict() == cfg.as_dict()


def test_derived_configs_validate():
    cfg = RunConfig()
    assert cfg.encoder_config(50).hidden == 32
    assert cfg.trainer_config().clip_norm == 5.0
    cfg.set("epochs", "0", "test")
    with pytest.raises(ConfigError):
        cfg.trainer_config()


def test_check_paths(tmp_path):
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="required"):
        cfg.check_paths("corpus")
    cfg.set("corpus", str(tmp_path / "missing.jsonl"), "test")
    with pytest.raises(ConfigError, match="no such file"):
        cfg.check_paths("corpus")
