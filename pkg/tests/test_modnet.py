import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modseg import autodiff as ad
from modseg.autodiff import Tensor, precision
from modseg.autodiff.ops import sigmoid_array
from modseg.errors import ConfigError, ShapeError
from modseg.modnet import (ModConfig, ModulationParams, SpatialPriorMaps, count_modulated_layers, init_model,
                           modulated_forward, seg_forward, spatial_modulate, visual_modulate)

SMALL = ModConfig(stage_channels=(4, 4, 6, 6, 8, 8), visual_channels=(3, 3, 4, 4, 4, 4), guide_resolution=16,
                  fusion_channels=4, input_sizes=(16, 24))


@pytest.fixture(scope="module")
def model():
    return init_model(SMALL, seed=3)


def test_count_modulated_layers():
    assert count_modulated_layers(ModConfig.reference()) == 9
    assert count_modulated_layers(ModConfig()) == 4
    assert count_modulated_layers(ModConfig(skip_first=5)) == 1


def test_toy_dim_is_192():
    m = init_model(ModConfig(), seed=0)
    assert m.dim == 32 + 32 + 64 + 64 == 192
    assert m.params["visual.fc.w"].shape[1] == 192


def test_partition_is_contiguous_cover(model):
    part = model.partition()
    assert part[0][0] == 0 and part[-1][1] == model.dim
    assert all(a[1] == b[0] for a, b in zip(part, part[1:]))
    assert [b - a for a, b in part] == model.config.modulated_channels()


@pytest.mark.parametrize("bad", [dict(skip_first=6), dict(stage_sizes=(2, 2)), dict(kernel_size=2),
                                 dict(input_sizes=(18,)), dict(visual_channels=(1, 2))])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        init_model(ModConfig(**bad))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_gamma_is_exactly_one_after_init(seed, scale):
    m = init_model(SMALL, seed=seed % 1000)
    guide = np.random.default_rng(seed).standard_normal((2, 3, 16, 16)) * scale
    g = visual_modulate(m, guide).gamma.data
    assert g.shape == (2, m.dim)
    assert np.all(g == 1.0)


def test_same_seed_same_params():
    a, b = init_model(SMALL, seed=11), init_model(SMALL, seed=11)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_model(SMALL, seed=12).checksum()


def test_parameter_names_unique_and_hierarchical(model):
    names = list(model.params)
    assert len(names) == len(set(names))
    assert all(n.split(".")[0] in ("segnet", "visual", "spatial") for n in names)
    assert len(model.group("spatial")) == 2 * count_modulated_layers(SMALL)


def test_visual_guide_shape_checked(model):
    with pytest.raises(ShapeError):
        visual_modulate(model, np.zeros((3, 8, 8)))


def test_visual_deterministic(model):
    rng = np.random.default_rng(0)
    m = model.clone()
    m.params["visual.fc.w"].data[...] = rng.standard_normal(m.params["visual.fc.w"].shape)
    guide = rng.standard_normal((3, 16, 16))
    assert visual_modulate(m, guide).gamma.data.tobytes() == visual_modulate(m, guide).gamma.data.tobytes()


# ------------------------------------------------------------------ spatial modulator

def test_spatial_zero_params_give_zero_maps(model):
    m = model.clone()
    for p in m.group("spatial").values():
        p.data[...] = 0
    maps = spatial_modulate(m, np.random.default_rng(0).uniform(size=(16, 16))).maps
    assert all(np.all(b.data == 0) for b in maps)


def test_spatial_constant_heatmap(model):
    m = model.clone()
    for k, p in m.group("spatial").items():
        p.data[...] = 1.0 if k.endswith(".w") else 0.0
    for b in spatial_modulate(m, np.full((16, 16), 0.5)).maps:
        np.testing.assert_array_equal(b.data, 0.5)


def test_spatial_matches_formula(model):
    rng = np.random.default_rng(5)
    heat = rng.uniform(size=(24, 16))
    with precision(np.float64):
        maps = spatial_modulate(model, heat).maps
    for l, (h, w) in enumerate(SMALL.layer_sizes(24, 16)):
        ml = ad.resize_array(heat, h, w)
        s = model.params[f"spatial.layer{l}.w"].data.reshape(-1).astype(np.float64)
        b = model.params[f"spatial.layer{l}.b"].data.astype(np.float64)
        expect = s[:, None, None] * ml[None] + b[:, None, None]
        np.testing.assert_allclose(maps[l].data[0], expect, atol=1e-12)


@pytest.mark.parametrize("size", [16, 24, 48, 64])
def test_prior_maps_match_feature_sizes(model, size):
    maps = spatial_modulate(model, np.zeros((size, size)), layer_sizes=SMALL.layer_sizes(size, size)).maps
    assert [tuple(b.shape[2:]) for b in maps] == SMALL.layer_sizes(size, size)
    assert [b.shape[1] for b in maps] == SMALL.modulated_channels()


def test_prior_maps_reference_sizes():
    cfg = ModConfig.reference()
    for s in cfg.input_sizes:
        sizes = cfg.layer_sizes(s, s)
        assert len(sizes) == 9 and sizes[-1] == (s // 16, s // 16)


def test_inconsistent_layer_sizes(model):
    with pytest.raises(ShapeError):
        spatial_modulate(model, np.zeros((16, 16)), layer_sizes=[(1, 1)] * 4)


# ------------------------------------------------------------------ modulation / forward

def test_modulation_examples():
    x = np.random.default_rng(0).standard_normal((2, 2, 3, 3)).astype(np.float32)
    same = ad.apply_modulation(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros((2, 3, 3)))).data
    assert same.tobytes() == x.tobytes()
    y = ad.apply_modulation(Tensor(x), Tensor([2.0, 0.0])).data
    np.testing.assert_array_equal(y[:, 0], 2 * x[:, 0])
    np.testing.assert_array_equal(y[:, 1], 0)
    with pytest.raises(ShapeError):
        ad.apply_modulation(Tensor(x), Tensor(np.ones(3)))


@given(st.integers(0, 2**31 - 1))
def test_modulation_elementwise_oracle(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal(3), rng.standard_normal((3, 4, 5))
    with precision(np.float64):
        y = ad.apply_modulation(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(y, g[None, :, None, None] * x + b[None], atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([8, 16, 24]), st.sampled_from([8, 16, 32]))
def test_identity_modulation_is_bitwise(seed, h, w):
    m = init_model(SMALL, seed=seed % 97)
    x = np.random.default_rng(seed).standard_normal((1, 3, h, w))
    plain = seg_forward(m, x).data
    ones = ModulationParams(Tensor(np.ones((1, m.dim))), m.partition())
    zeros = SpatialPriorMaps([Tensor(np.zeros((1, c, a, b)))
                              for c, (a, b) in zip(SMALL.modulated_channels(), SMALL.layer_sizes(h, w))])
    assert seg_forward(m, x, ones, zeros).data.tobytes() == plain.tobytes()
    assert plain.shape == (1, 1, h, w)


def test_zero_spatial_params_equal_unmodulated(model):
    m = model.clone()
    for p in m.group("spatial").values():
        p.data[...] = 0
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 16, 16))
    out = modulated_forward(m, x, rng.standard_normal((1, 3, 16, 16)), rng.uniform(size=(16, 16)))
    assert out.data.tobytes() == seg_forward(m, x).data.tobytes()


def test_indivisible_input(model):
    with pytest.raises(ShapeError):
        seg_forward(model, np.zeros((1, 3, 18, 16)))


def test_channel_locality_probe(model):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 16, 16))
    l, c = 1, 2
    i = SMALL.skip_first + l
    gamma = np.ones((1, model.dim))
    bumped = gamma.copy()
    bumped[0, model.partition()[l][0] + c] = 3.0

    def run(m, g):
        return seg_forward(m, x, ModulationParams(Tensor(g), m.partition())).data

    assert not np.array_equal(run(model, gamma), run(model, bumped))
    m = model.clone()
    m.params[f"segnet.conv{i}.w"].data[c] = 0
    m.params[f"segnet.conv{i}.b"].data[c] = 0
    assert run(m, gamma).tobytes() == run(m, bumped).tobytes()


def test_probabilities_finite(model):
    rng = np.random.default_rng(4)
    logits = modulated_forward(model, rng.standard_normal((2, 3, 24, 24)) * 100,
                               rng.standard_normal((2, 3, 16, 16)), rng.uniform(size=(2, 24, 24))).data
    p = sigmoid_array(logits)
    assert np.all(np.isfinite(p)) and np.all((p >= 0) & (p <= 1))


def test_ablation_flags_ignore_modulators(model):
    from dataclasses import replace
    rng = np.random.default_rng(6)
    x, g, h = rng.standard_normal((1, 3, 16, 16)), rng.standard_normal((1, 3, 16, 16)), rng.uniform(size=(16, 16))
    m = init_model(replace(SMALL, use_visual=False, use_spatial=False), seed=3)
    assert modulated_forward(m, x, g, h).data.tobytes() == seg_forward(m, x).data.tobytes()
    assert not any(k.startswith(("visual.", "spatial.")) for k in m.trainable())


def test_modulate_after_relu_flag():
    from dataclasses import replace
    m = init_model(replace(SMALL, modulate_before_relu=False), seed=1)
    x = np.random.default_rng(0).standard_normal((1, 3, 16, 16))
    ones = ModulationParams(Tensor(np.ones((1, m.dim))), m.partition())
    assert seg_forward(m, x, ones).data.tobytes() == seg_forward(m, x).data.tobytes()
