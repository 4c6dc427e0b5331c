import pytest

from neuflow.config import ConfigError, NeuFlowConfig, group_count, load_config


def test_defaults():
    cfg = NeuFlowConfig.base()
    assert cfg.correlation_channels == 49
    assert cfg.attention_scale == pytest.approx(90 ** -0.5)
    assert NeuFlowConfig.base(softmax_scale=0.5).attention_scale == 0.5


def test_dict_round_trip():
    cfg = NeuFlowConfig.tiny(seed=3)
    assert NeuFlowConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_key():
    with pytest.raises(ConfigError):
        NeuFlowConfig.from_dict({"depth": 3})


@pytest.mark.parametrize(
    "overrides",
    [
        {"feature_dim": 0},
        {"cross_attention_layers": 0},
        {"refinement_depth": 1},
        {"per_level_channels": (8, 8, 8)},
        {"per_level_channels": (8, 8, 0, 8, 8)},
        {"softmax_scale": -1.0},
    ],
)
def test_invalid(overrides):
    with pytest.raises(ConfigError):
        NeuFlowConfig.base(**overrides)


def test_overrides():
    cfg = NeuFlowConfig.tiny().with_overrides(["mask_width=20", "per_level_channels=[4, 4, 4, 4, 4]"])
    assert cfg.mask_width == 20 and cfg.per_level_channels == (4, 4, 4, 4, 4)
    with pytest.raises(ConfigError):
        cfg.with_overrides(["mask_width"])


def test_load_yaml(tmp_path):
    (tmp_path / "a.yaml").write_text("preset: tiny\nmodel:\n  feature_dim: 12\n")
    (tmp_path / "b.yaml").write_text("feature_dim: 30\n")
    assert load_config(tmp_path / "a.yaml").feature_dim == 12
    assert load_config(tmp_path / "a.yaml").ffn_dim == 16
    assert load_config(tmp_path / "b.yaml").ffn_dim == 360
    assert load_config(None, preset="tiny") == NeuFlowConfig.tiny()
    (tmp_path / "c.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigError):
        load_config(None, preset="giant")


@pytest.mark.parametrize("channels,expected", [(90, 6), (24, 8), (8, 8), (7, 7), (64, 8), (1, 1)])
def test_group_count(channels, expected):
    assert group_count(channels, 8) == expected
