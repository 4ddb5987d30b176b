import math
from pathlib import Path

import pytest

from lodada.config import ConfigError, RunConfig, from_dict, load_config, to_dict, with_override

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))


def write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_minimal_config_uses_defaults(tmp_path):
    cfg = load_config(write(tmp_path, '[env]\nkind = "gridworld"\n'))
    assert cfg.method == "lodada" and cfg.seeds == (0,)
    assert cfg.filter.xi == (90.0, 80.0, 70.0) and cfg.localize.K == 30
    assert cfg.train.tau == 0.7 and cfg.cvae.M == 10


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_load_and_roundtrip(path):
    cfg = load_config(path)
    assert from_dict(RunConfig, to_dict(cfg)) == cfg


@pytest.mark.parametrize("text,path", [
    ('[env]\nkind = "gridworld"\nwidht = 3\n', "env.widht"),
    ('[env]\nkind = "gridworld"\n[train]\nsteps = "many"\n', "train.steps"),
    ('[env]\nkind = "gridworld"\n[filter]\nxi1 = 50.0\nxi2 = 80.0\n', "filter"),
    ('[env]\nkind = "gridworld"\n[train]\nhidden = [64, "x"]\n', "train.hidden[1]"),
    ('[env]\nkind = "gridworld"\n[train]\ndiscrete_actions = 1\n', "train.discrete_actions"),
    ('[env]\nwidth = 3\n', "env.kind"),
    ('method = "bc"\n[env]\nkind = "gridworld"\n', "RunConfig"),
    ('bogus = 1\n[env]\nkind = "gridworld"\n', "bogus"),
])
def test_errors_name_the_field(tmp_path, text, path):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, text))
    assert info.value.path == path


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[env\n"))


def test_infinite_delta(tmp_path):
    cfg = load_config(write(tmp_path, '[env]\nkind = "gridworld"\n[localize]\ndelta = "inf"\n'))
    assert math.isinf(cfg.localize.delta)
    assert to_dict(cfg)["localize"]["delta"] == "inf"
    assert from_dict(RunConfig, to_dict(cfg)) == cfg


def test_with_override(tmp_path):
    cfg = load_config(write(tmp_path, '[env]\nkind = "gridworld"\n'))
    new = with_override(cfg, "localize.K", 50)
    assert new.localize.K == 50 and cfg.localize.K == 30
    assert with_override(cfg, "train.hidden", (8, 8)).train.hidden == (8, 8)
    assert with_override(cfg, "method", "iql-pooled").method == "iql-pooled"
    with pytest.raises(ConfigError):
        with_override(cfg, "localize.k", 50)
    with pytest.raises(ConfigError):
        with_override(cfg, "nope.K", 50)
    with pytest.raises(ConfigError):
        with_override(cfg, "localize.K", "fifty")


def test_lodada_view_carries_sections(tmp_path):
    cfg = load_config(write(tmp_path, 'normalize = true\n[env]\nkind = "gridworld"\n'))
    lc = cfg.lodada()
    assert lc.normalize and lc.train is cfg.train and lc.filter is cfg.filter
