import pytest

from tabomlab.config import ConfigError, load_config


def test_defaults_validate():
    cfg = load_config()
    assert cfg.seeds == [0, 1, 2]
    assert set(cfg.in_domain).isdisjoint(cfg.ood)
    assert cfg.tabom["window"] >= 2


def test_dotted_override_changes_field_and_digest():
    a = load_config()
    b = load_config(overrides=["tabom.window=6", "experiment.seeds=4"])
    assert b.tabom["window"] == 6 and b.seeds == [4]
    assert a.digest != b.digest


def test_file_overrides_defaults(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[finetune]\nlr = 0.01\n")
    assert load_config(p).finetune["lr"] == 0.01


@pytest.mark.parametrize("override,key", [
    ("tasks.in_domain=sort,nope", "tasks.in_domain"),
    ("tabom.window=1", "tabom.window"),
    ("tabom.context_mode=fuzzy", "tabom.context_mode"),
    ("finetune.objectives=tabom,magic", "finetune.objectives"),
    ("model.layers=two", "model.layers"),
    ("ce.ratios=0.5,1.0", "ce.ratios"),
    ("tasks.ood=sort", "tasks.ood"),
    ("model.colour=3", "model.colour"),
])
def test_field_level_errors(override, key):
    with pytest.raises(ConfigError) as err:
        load_config(overrides=[override])
    assert err.value.key == key


def test_window_one_allowed_without_ranking():
    cfg = load_config(overrides=["tabom.window=1", "tabom.weight=0"])
    assert cfg.tabom["window"] == 1


def test_unknown_section_in_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)
