import pytest

from immp.config import RunConfig, dump_toml, load_config, merge
from immp.errors import ConfigError
from immp.experiments import EXPERIMENTS, default_config


def test_every_experiment_has_defaults():
    for name in EXPERIMENTS:
        cfg = default_config(name)
        assert cfg.experiment == name
        assert set(cfg.as_dict()) == {"run", "model", "integrator", "penalty", "thermostat", "params"}


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        default_config("nope")


@pytest.mark.parametrize(
    "data",
    [
        {"runn": {"seed": 1}},
        {"run": {"colour": 1}},
        {"integrator": {"dtt": 0.1}},
        {"params": {"not_a_knob": 1}},
    ],
)
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError):
        merge(default_config("tune"), data)


@pytest.mark.parametrize(
    "data",
    [
        {"run": {"seed": "one"}},
        {"run": {"replicas": 1.5}},
        {"integrator": {"metropolis": 1}},
        {"params": {"nubar_grid": 0.1}},
        {"thermostat": {"beta": -1.0}},
        {"integrator": {"dt": 0.0}},
        {"run": {"replicas": 0}},
        {"run": {"experiment": "exactness"}},
    ],
)
def test_bad_values_rejected(data):
    with pytest.raises(ConfigError):
        merge(default_config("tune"), data)


def test_merge_overrides_and_coerces():
    cfg = merge(default_config("tune"), {"run": {"seed": 9, "replicas": 4.0}, "params": {"target": 0.8}})
    assert cfg.seed == 9 and cfg.replicas == 4 and isinstance(cfg.replicas, int)
    assert cfg.params["target"] == 0.8
    # defaults are not mutated
    assert default_config("tune").params["target"] == 0.9


def test_toml_round_trip(tmp_path):
    cfg = merge(default_config("stiff-demo"), {"run": {"seed": 3}, "params": {"eps_list": [0.1, 0.01]}})
    path = tmp_path / "c.toml"
    path.write_text(dump_toml(cfg))
    back = load_config(path, default_config("stiff-demo"))
    assert back == cfg


def test_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[run\nseed = 1\n")
    with pytest.raises(ConfigError):
        load_config(path, default_config("tune"))


def test_with_overrides_ignores_none():
    cfg = RunConfig("tune", seed=1)
    assert cfg.with_overrides(seed=None, replicas=3).seed == 1
    with pytest.raises(ConfigError):
        cfg.with_overrides(bogus=1)
