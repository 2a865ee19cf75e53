import math

import pytest

from duphist.config import (
    DEFAULT_WEIGHTS,
    Config,
    ConfigError,
    parse_config_text,
    read_config,
)


def test_defaults():
    cfg = Config()
    assert cfg.lambda_rate == 200.0
    assert cfg.mean_dup_length == 14307.0
    assert cfg.mean_dup_distance == 306718.0
    assert cfg.p_inversion == 0.39
    assert cfg.p_deletion == 0.05
    assert cfg.heats == (0.5, 0.6, 1.0, 1.2)
    assert cfg.tree_keep_prob == 0.95
    assert cfg.weights() == DEFAULT_WEIGHTS


def test_default_weights_values():
    ln10 = math.log(10.0)
    assert DEFAULT_WEIGHTS == (
        1.0,
        ln10,
        -10.0,
        -1.0,
        -math.log(100.0),
        -ln10,
        ln10,
        -ln10,
        3.0,
        -math.log(1000.0),
    )


def test_parse_overrides_and_comments():
    cfg = parse_config_text(
        """
        # run at a smaller scale
        lambda = 50      # rate per unit branch length
        iterations = 400
        burn_in = 100
        heats = 1.0,1.5
        w3 = -2.5
        """
    )
    assert cfg.lambda_rate == 50.0
    assert cfg.iterations == 400
    assert cfg.heats == (1.0, 1.5)
    assert cfg.weights()[2] == -2.5
    # untouched keys keep defaults
    assert cfg.p_deletion == 0.05


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("lamda = 50")


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("iterations = soon")


def test_validation_runs_on_parse():
    with pytest.raises(ConfigError, match="burn_in"):
        parse_config_text("iterations = 10\nburn_in = 10")


def test_model_params_view():
    cfg = parse_config_text("lambda = 75\nhky_kappa = 2.0")
    params = cfg.model_params()
    assert params.lambda_rate == 75.0
    assert params.hky.kappa == 2.0
    assert params.hky.pi == (0.25, 0.25, 0.25, 0.25)


def test_snapshot_uses_lambda_key():
    snap = Config().snapshot()
    assert snap["lambda"] == 200.0
    assert "lambda_rate" not in snap
    assert snap["heats"] == "0.5,0.6,1,1.2"


def test_read_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("iterations = 20\nburn_in = 5\n")
    cfg = read_config(str(path))
    assert cfg.iterations == 20
    bad = tmp_path / "bad.cfg"
    bad.write_text("nope = 1\n")
    with pytest.raises(ConfigError, match="bad.cfg"):
        read_config(str(bad))


def test_packaged_configs_parse():
    from importlib import resources

    data = resources.files("duphist").joinpath("data")
    cfg = read_config(str(data / "desk.cfg"))
    assert cfg.lambda_rate == 30.0
    assert cfg.ancestral_length == 10000
    assert cfg.chains == 2
