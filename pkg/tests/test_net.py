import dataclasses

import numpy as np
import pytest

from mixercseg.degconv import DegConfig
from mixercseg.exceptions import ConfigError
from mixercseg.net import (
    ModelConfig,
    build_model,
    flop_breakdown,
    flop_count,
    load_model,
    param_breakdown,
    param_count,
    save_model,
)
from mixercseg.transmixer import TransMixerConfig


def image(seed=0, size=64):
    return np.random.default_rng(seed).random((3, size, size))


def test_stage_resolutions_and_output_shape():
    model = build_model(ModelConfig())
    logits, aux = model(image(), return_aux=True)
    assert logits.shape == (1, 64, 64)
    assert [f.shape for f in aux.pyramid] == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]
    assert [f.shape for f in aux.refined] == [f.shape for f in aux.pyramid]
    assert len(aux.blocks) == 4 and all(aux.deg)


def test_deterministic():
    a = build_model(ModelConfig(), seed=3)(image()).data
    b = build_model(ModelConfig(), seed=3)(image()).data
    c = build_model(ModelConfig(), seed=4)(image()).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_logits_finite(seed):
    assert np.isfinite(build_model(ModelConfig(), seed)(image(seed)).data).all()


CONFIGS = {
    "default": ModelConfig(),
    "cnn": ModelConfig(architecture="cnn"),
    "no-deg": ModelConfig(use_degconv=False),
    "concat": ModelConfig(fusion="concat"),
    "gamma0": ModelConfig(transmixer=TransMixerConfig(gamma=0.0)),
    "gamma1": ModelConfig(transmixer=TransMixerConfig(gamma=1.0)),
    "literal": ModelConfig(transmixer=TransMixerConfig(literal_delta=True, depth=2)),
    "wide": ModelConfig(widths=(16, 32, 48, 64), state_dim=8, deg=DegConfig(n_bins=36)),
}


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_param_count_matches_model(name):
    cfg = CONFIGS[name]
    assert param_count(cfg) == build_model(cfg).num_parameters()


def test_param_breakdown_parts():
    parts = param_breakdown(ModelConfig())
    assert set(parts) == {"stem", "downsample", "head", "encoder", "degconv", "fusion"}
    assert parts["stem"] == 3 * 8 * 9 + 8 + 8 * 8 * 9 + 8
    assert parts["fusion"] == 8 + 1
    assert param_breakdown(ModelConfig(use_degconv=False))["degconv"] == 0


def test_conv_flops_scale_by_four():
    cfg = ModelConfig()
    small = flop_breakdown(cfg, 256, 256)
    large = flop_breakdown(cfg, 512, 512)
    assert large["conv"] == 4 * small["conv"]
    assert large["upsample"] == 4 * small["upsample"]
    assert flop_count(cfg, 512, 512) > 4 * flop_count(cfg, 256, 256)  # attention grows faster


def test_flop_count_rejects_bad_size():
    with pytest.raises(ConfigError):
        flop_count(ModelConfig(), 48, 64)


@pytest.mark.parametrize("change", [
    {"widths": (8, 16, 32)},
    {"widths": (0, 16, 32, 64)},
    {"widths": (8, 8, 32, 64)},
    {"input_size": (48, 64)},
    {"fusion": "sum"},
    {"architecture": "unet"},
    {"widths": (9, 16, 32, 64)},
])
def test_invalid_configs(change):
    with pytest.raises(ConfigError):
        dataclasses.replace(ModelConfig(), **change).validate()


def test_indivisible_input_rejected():
    model = build_model(ModelConfig())
    with pytest.raises(ConfigError):
        model(np.zeros((3, 48, 64)))
    with pytest.raises(ConfigError):
        model(np.zeros((1, 64, 64)))


def test_config_dict_round_trip():
    cfg = CONFIGS["wide"]
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"width": [8, 16, 32, 64]})


def test_config_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"model": {"nbins": 36, "gamma": 0.25}}')
    cfg = ModelConfig.from_json(path)
    assert cfg.deg.n_bins == 36 and cfg.transmixer.gamma == 0.25


@pytest.mark.parametrize("name", ["default", "cnn"])
def test_checkpoint_round_trip(tmp_path, name):
    model = build_model(CONFIGS[name], seed=5)
    save_model(tmp_path / "m.ckpt", model, {"seed": 5})
    loaded, meta = load_model(tmp_path / "m.ckpt")
    assert meta["seed"] == 5
    assert type(loaded) is type(model)
    assert np.array_equal(loaded(image()).data, model(image()).data)


def test_checkpoint_f64(tmp_path):
    model = build_model(ModelConfig()).astype(np.float64)
    save_model(tmp_path / "m.ckpt", model)
    loaded, _ = load_model(tmp_path / "m.ckpt")
    assert loaded.dtype == np.float64
    assert np.array_equal(loaded(image()).data, model(image()).data)
