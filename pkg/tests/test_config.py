import pytest

from bijecta.config import PROFILES, RunConfig, load_config, parse_text, parse_value
from bijecta.errors import ConfigError
from bijecta.linear_ica import LinearICAConfig
from bijecta.model import BijectaConfig


def test_parse_values():
    assert parse_value("steps", "12") == 12
    assert parse_value("lr", "1e-3") == 1e-3
    assert parse_value("sphere", "false") is False
    assert parse_value("prior_alpha", "none") is None
    assert parse_value("output_dir", "runs/x") == "runs/x"
    with pytest.raises(ConfigError) as info:
        parse_value("steps", "many")
    assert info.value.key == "steps"
    with pytest.raises(ConfigError) as info:
        parse_value("colour", "red")
    assert info.value.key == "colour"


def test_parse_text_skips_comments():
    text = "# a run\nmodel = linear_ica\n\nsteps = 7  # short\n"
    assert parse_text(text) == {"model": "linear_ica", "steps": 7}
    with pytest.raises(ConfigError):
        parse_text("just words")


def test_resolution_order(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nsteps = 10\nlr = 0.1\n")
    cfg = load_config(path, {"steps": "20"}, profile="paper", env={"BIJECTA_SEED": "9"})
    # file beats profile, env beats file, overrides beat everything
    assert (cfg.lr, cfg.batch, cfg.seed, cfg.steps) == (0.1, 512, 9, 20)
    assert load_config(path, env={}).seed == 3
    assert load_config(None, {"seed": "5"}, env={"BIJECTA_SEED": "9"}).seed == 5


def test_profiles():
    assert load_config(env={}).steps is None
    paper = load_config(profile="paper", env={})
    for k, v in PROFILES["paper"].items():
        assert getattr(paper, k) == v
    with pytest.raises(ConfigError):
        load_config(profile="huge", env={})


def test_validation_names_the_key():
    for key, value in [("model", "vae"), ("d_s", "0"), ("prior_rho", "-1"), ("lr", "0"),
                       ("ica_mode", "diagonal"), ("restarts", "0")]:
        with pytest.raises(ConfigError) as info:
            load_config(overrides={key: value}, env={})
        assert info.value.key == key
    with pytest.raises(ConfigError) as info:
        load_config(overrides={"dataset": "file"}, env={})
    assert info.value.key == "data_path"
    with pytest.raises(ConfigError):
        load_config(overrides={"nope": "1"}, env={})


def test_model_config_fills_defaults():
    cfg = RunConfig(model="linear_ica", steps=50)
    lin = cfg.model_config()
    assert isinstance(lin, LinearICAConfig) and lin.steps == 50
    assert cfg.resolved().lr == LinearICAConfig().lr
    bij = RunConfig(model="flow_only").model_config()
    assert isinstance(bij, BijectaConfig) and bij.model == "flow_only"
    assert RunConfig().resolved().b_init == BijectaConfig().b_init


def test_text_round_trip(tmp_path):
    cfg = load_config(overrides={"prior_alpha": "2.5", "sphere": "true"}, env={}).resolved()
    path = tmp_path / "again.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path, env={}) == cfg
