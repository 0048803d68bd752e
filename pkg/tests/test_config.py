"""Configuration validation, presets, and the key=value file format."""

from dataclasses import replace

import pytest

from groundnet.config import (ModelConfig, config_from_text, config_to_text,
                              load_config, preset_config, save_config)
from groundnet.errors import ConfigError


def test_presets():
    desk = preset_config("desk")
    assert desk.image_size == 128 and desk.feat_size == 8
    paper = preset_config("paper")
    assert paper.image_size == 512 and paper.d_attn == 512
    assert paper.anchor_scales == (64.0, 128.0, 256.0)
    with pytest.raises(ConfigError):
        preset_config("laptop")


def test_derived_properties():
    cfg = preset_config("desk")
    assert cfg.n_cells == 64
    assert cfg.anchors_per_cell == 9


def test_validation_errors():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=100)          # not divisible by 16
    with pytest.raises(ConfigError):
        ModelConfig(d_attn=63)               # odd
    with pytest.raises(ConfigError):
        ModelConfig(t_max=2)
    with pytest.raises(ConfigError):
        ModelConfig(anchor_scales=())
    with pytest.raises(ConfigError):
        ModelConfig(anchor_ratios=(0.5, -1.0))
    with pytest.raises(ConfigError):
        ModelConfig(w_rpn=-0.1)
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")


def test_roundtrip_both_presets():
    for name in ("desk", "paper"):
        cfg = preset_config(name)
        assert config_from_text(config_to_text(cfg)) == cfg


def test_roundtrip_modified_fields():
    cfg = replace(preset_config("desk"), seed=123, lr=0.00025,
                  anchor_ratios=(0.25, 1.0, 4.0), no_global_h=True,
                  embedding_file="vectors.txt")
    assert config_from_text(config_to_text(cfg)) == cfg


def test_partial_text_over_base():
    base = preset_config("desk")
    cfg = config_from_text("seed = 99\nlr = 0.01\n", base=base)
    assert cfg.seed == 99 and cfg.lr == 0.01
    assert cfg.image_size == base.image_size


def test_text_comments_and_blank_lines():
    base = preset_config("desk")
    text = "# a comment\n\nseed = 5  # trailing comment\n"
    assert config_from_text(text, base=base).seed == 5


def test_bool_spellings():
    base = preset_config("desk")
    for val, want in (("true", True), ("1", True), ("yes", True),
                      ("false", False), ("0", False), ("no", False)):
        cfg = config_from_text(f"no_global_h = {val}", base=base)
        assert cfg.no_global_h is want


def test_parse_errors_carry_line_numbers():
    base = preset_config("desk")
    with pytest.raises(ConfigError, match="line 1"):
        config_from_text("not a config line", base=base)
    with pytest.raises(ConfigError, match="line 2"):
        config_from_text("seed = 1\nbogus_key = 2", base=base)
    with pytest.raises(ConfigError, match="line 1"):
        config_from_text("seed = abc", base=base)
    with pytest.raises(ConfigError, match="line 1"):
        config_from_text("no_global_h = maybe", base=base)


def test_save_load_file(tmp_path):
    cfg = replace(preset_config("desk"), seed=11)
    path = tmp_path / "run.cfg"
    save_config(cfg, str(path))
    assert load_config(str(path)) == cfg
    assert load_config(str(path), base=preset_config("paper")) == cfg


def test_with_ablation():
    cfg = preset_config("desk")
    assert cfg.with_ablation("a").no_embedding_file
    assert cfg.with_ablation("b").no_global_h
    assert cfg.with_ablation("c").rpn_without_attention
    assert not cfg.no_embedding_file
    with pytest.raises(ConfigError):
        cfg.with_ablation("d")
