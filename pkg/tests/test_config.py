import pytest

from brightsign.config import (
    ConfigError,
    RunConfig,
    attack_config_from,
    parse_config,
    render_config,
)


def test_defaults_roundtrip_through_render_and_parse():
    cfg = RunConfig()
    text = render_config(cfg)
    again = parse_config(text)
    assert again == cfg


def test_parse_basic_pairs_and_comments():
    cfg = parse_config("""
# a comment
seed = 42
epsilon = 8     # inline comment
attacks = fgsm, mi_fgsm
workers = 3
""")
    assert cfg.seed == 42
    assert cfg.epsilon == 8.0
    assert cfg.attacks == ("fgsm", "mi_fgsm")
    assert cfg.workers == 3


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("momentum = 3\n")


def test_numeric_range_validation():
    with pytest.raises(ConfigError, match="outside"):
        parse_config("sgd_momentum = 1.0\n")
    with pytest.raises(ConfigError, match="outside"):
        parse_config("epsilon = 300\n")
    with pytest.raises(ConfigError, match="outside"):
        parse_config("class_count = 27\n")
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config("iterations = many\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("just some words\n")


def test_empty_value_only_for_optional_keys():
    cfg = parse_config("brightness_p =\n")
    assert cfg.brightness_p is None
    with pytest.raises(ConfigError, match="needs a value"):
        parse_config("epsilon =\n")


def test_unknown_attack_rejected():
    with pytest.raises(ConfigError, match="unknown attack"):
        parse_config("attacks = fgsm, cw\n")


def test_idx_dataset_requires_paths():
    with pytest.raises(ConfigError, match="dataset=idx needs"):
        parse_config("dataset = idx\n")


def test_attack_config_scales_epsilon_to_unit_range():
    cfg = RunConfig()
    ac = attack_config_from(cfg, "mi_fgsm", seed=5)
    assert ac.epsilon == pytest.approx(16 / 255)
    assert ac.resolved_step == pytest.approx(1.6 / 255)
    assert ac.decay == 1.0
    assert ac.seed == 5


def test_attack_config_preset_probability_defaults():
    cfg = RunConfig()
    assert attack_config_from(cfg, "rt_mi_fgsm", 0).brightness.probability == 0.5
    assert attack_config_from(cfg, "rt_dim", 0).brightness.probability == 1.0
    assert attack_config_from(cfg, "rt_dim", 0).diversity.probability == 0.5


def test_attack_config_overrides_apply():
    cfg = parse_config("""
brightness_p = 0.9
brightness_mode = constant
brightness_r = 0.5
diversity_p = 0.25
step_alpha = 2.0
""")
    ac = attack_config_from(cfg, "rt_dim", 1)
    assert ac.brightness.probability == 0.9
    assert ac.brightness.mode == "constant"
    assert ac.brightness.rate == 0.5
    assert ac.diversity.probability == 0.25
    assert ac.resolved_step == pytest.approx(2 / 255)


def test_overrides_do_not_add_missing_transforms():
    cfg = parse_config("brightness_p = 0.9\n")
    ac = attack_config_from(cfg, "mi_fgsm", 0)
    assert ac.brightness is None and ac.diversity is None
