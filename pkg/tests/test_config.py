import pytest

from gmvlab.config import ConfigError, ExperimentConfig, TrainingConfig, parse_config, render_config


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(render_config(cfg)) == cfg


def test_overrides_and_types():
    cfg = parse_config("""
# comment
generator.n_clicks = 500
generator.delay_mean_hours = 1, 2.5, 3
model.tau1 = 0.2
training.seeds = 3, 4
training.lr_grid = 0.01
training.router_close_bce = false
split.online_days = 57, 81   # trailing comment
""")
    assert cfg.generator.n_clicks == 500
    assert cfg.generator.delay_mean_hours == (1.0, 2.5, 3.0)
    assert cfg.model.tau1 == 0.2
    assert cfg.training.seeds == (3, 4)
    assert cfg.training.lr_grid == (0.01,)
    assert cfg.training.router_close_bce is False
    assert cfg.split.online_days == (57, 81)


@pytest.mark.parametrize("text, match", [
    ("nosection = 1", "section.key"),
    ("bogus.key = 1", "unknown section"),
    ("model.nope = 1", "unknown key"),
    ("model.tau1 = 0.2\nmodel.tau1 = 0.3", "duplicate"),
    ("generator.n_clicks = lots", "cannot parse"),
    ("training.router_close_bce = maybe", "true or false"),
    ("just text", "expected"),
    ("model.tau1 = 0.95", "tau1"),
    ("training.regime = nope", "unknown regime"),
    ("split.online_days = 57, 90", "past the generated timeline"),
    ("split.online_days = 52, 60", "gap"),
    ("model.n_fields = 3", "n_fields"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_training_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(lr_grid=())
    with pytest.raises(ConfigError):
        TrainingConfig(validation_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainingConfig(purity_check_every=-1)
