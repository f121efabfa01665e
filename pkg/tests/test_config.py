import pytest

from zal3d import config
from zal3d.errors import ConfigError


def test_defaults_parse():
    cfg = config.default()
    assert cfg.train_classes == ("wavy-plane",)
    assert cfg.test_class == "sphere"
    assert cfg.irrelevant_classes == ("cylinder",)
    assert cfg.size == 224
    assert cfg.temperature == 0.07
    assert cfg.w_con == 1.0 and cfg.w_rd == 100.0
    assert cfg.epochs == 5
    assert cfg.coreset_ratio == 0.1
    assert cfg.b == 3 and cfg.eta == 0.1
    assert cfg.w_d == 0.5 and cfg.w_c == 0.5
    assert cfg.sigma == 4.0
    assert cfg.normalize_before_fuse is True
    assert cfg.fpr_limit == 0.3
    assert cfg.seed == 0 and cfg.threads == 1
    assert cfg.patch_size == 8
    assert cfg.net_widths == (32, 64)
    assert cfg.net_radii == (0.1, 0.25)


def test_file_overrides_merge():
    cfg = config.from_text(
        "[synth]\nsize = 96\ntrain_count = 5\n\n[train]\nepochs = 2\n\n[run]\nseed = 7\n"
    )
    assert cfg.size == 96 and cfg.train_count == 5
    assert cfg.epochs == 2 and cfg.seed == 7
    assert cfg.test_normal_count == 10


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config section"):
        config.from_text("[nonsense]\nx = 1\n")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config.from_text("[train]\nlearning_rate = 0.1\n")


def test_zero_shot_constraint():
    with pytest.raises(ConfigError, match="disjoint"):
        config.from_text("[data]\ntrain_classes = sphere\ntest_class = sphere\n")
    with pytest.raises(ConfigError, match="disjoint"):
        config.from_text("[data]\nirrelevant_classes = cylinder,sphere\n")


def test_size_must_divide_by_32():
    with pytest.raises(ConfigError, match="divisible"):
        config.from_text("[synth]\nsize = 100\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        config.from_text("[train]\nepochs = five\n")
    with pytest.raises(ConfigError, match="boolean"):
        config.from_text("[scoring]\nnormalize_before_fuse = maybe\n")


def test_ini_roundtrip_is_identity():
    cfg = config.from_text(
        "[synth]\nsize = 64\nnoise = 0.001\n\n[scoring]\nw_c = 0.25\nw_d = 0.75\n"
    )
    assert config.from_text(cfg.to_ini()) == cfg


def test_overrides_produce_new_config():
    cfg = config.default()
    ablated = cfg.with_overrides(w_con=0.0, w_c=0.0, eta=0.0)
    assert ablated.w_con == 0.0 and ablated.w_c == 0.0 and ablated.eta == 0.0
    assert cfg.w_con == 1.0


def test_module_config_factories():
    cfg = config.from_text("[train]\ntemperature = 0.2\nw_rd = 3\n\n[scoring]\nb = 5\n")
    lc = cfg.loss_config()
    assert lc.temperature == 0.2 and lc.w_rd == 3.0
    sc = cfg.score_config()
    assert sc.b == 5 and sc.sigma == 4.0
    syn = cfg.synthesis_config(seed=11)
    assert syn.seed == 11 and syn.negatives_per_positive == 16


def test_seed_precedence(monkeypatch):
    cfg = config.from_text("[run]\nseed = 3\n")
    monkeypatch.delenv(config.ENV_SEED, raising=False)
    assert config.resolve_seed(None, cfg) == 3
    monkeypatch.setenv(config.ENV_SEED, "17")
    assert config.resolve_seed(None, cfg) == 17
    assert config.resolve_seed(42, cfg) == 42
    monkeypatch.setenv(config.ENV_SEED, "not-a-number")
    with pytest.raises(ConfigError, match="ZAL3D_SEED"):
        config.resolve_seed(None, cfg)
