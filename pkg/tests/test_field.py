import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from torchunit import autodiff as ad
from torchunit.errors import ConfigError
from torchunit.field import (
    FieldConfig,
    ModelPair,
    TorchFieldNetwork,
    distance_weights,
    positional_encode,
    radiance_samples,
    sync_coarse_from_fine,
    tap_scales,
)
from torchunit.render import render_rays

from conftest import check_grads

TINY = FieldConfig(channels=(8, 8), kernel_size=3, patch_size=3, pos_levels=2, dir_levels=1)


def ray_inputs(n=5, seed=0, t=None):
    rng = np.random.default_rng(seed)
    if t is None:
        t = np.sort(rng.uniform(1.0, 3.0, n))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    o = rng.normal(size=3)
    return t, o + t[:, None] * d, d


def test_positional_encoding_examples():
    np.testing.assert_allclose(positional_encode([0.0], 1), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(positional_encode([0.5], 1), [0.5, 1.0, 0.0], atol=1e-15)
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(positional_encode(x, 0), x)


def test_distance_weight_examples():
    c = math.cos(math.pi / 4)
    np.testing.assert_allclose(distance_weights([1.0, 2.0, 3.0], 1), [c, 1.0, c], atol=1e-7)
    np.testing.assert_array_equal(distance_weights([2.0, 2.0, 2.0], 1), [1.0, 1.0, 1.0])
    want = [math.cos(math.pi / 2 * 0.1 / 0.6), 1.0, math.cos(math.pi / 2 * 0.3 / 0.6)]
    got = distance_weights([0.0, 0.1, 0.4], 1)
    np.testing.assert_allclose(got, want, atol=1e-7)
    np.testing.assert_allclose(got, [0.96593, 1.0, 0.70711], atol=1e-5)


def test_distance_weights_reject_non_finite():
    with pytest.raises(ValueError):
        distance_weights([0.0, math.nan, 1.0], 1)


def test_tap_scales_match_window_weights():
    t = np.array([0.0, 0.1, 0.4, 1.0, 1.05])
    s = tap_scales(t, 3)
    for n in range(5):
        window = t[np.clip([n - 1, n, n + 1], 0, 4)]
        np.testing.assert_array_equal(s[n], distance_weights(window, 1))


@given(
    st.lists(st.floats(0.0, 100.0), min_size=2, max_size=7, unique=True),
    st.floats(0.01, 100.0),
)
def test_distance_weight_properties(ts, lam):
    t = np.sort(np.array(ts))
    anchor = len(t) // 2
    w = distance_weights(t, anchor)
    d = np.abs(t - t[anchor])
    assert w[anchor] == 1.0
    assert np.all(w > 0)
    order = np.argsort(d)
    assert np.all(np.diff(w[order]) <= 0)


def test_zero_init_heads():
    net = TorchFieldNetwork(FieldConfig(channels=(4, 4), patch_size=3, zero_init_heads=True), rng=0)
    out = net(*ray_inputs())
    assert np.all(out.sigma.values == 0.0)
    assert np.all(out.color.values == 0.5)


def test_output_shapes_and_ranges():
    net = TorchFieldNetwork(TINY, rng=1)
    out = net(*ray_inputs(n=6))
    assert out.sigma.shape == (6, 3, 3)
    assert out.color.shape == (6, 3, 3, 3)
    samples = radiance_samples(out)
    assert len(samples) == 6 and samples[0].density_patch.shape == (3, 3)
    assert samples[0].color_patch.shape == (3, 3, 3)


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.integers(1, 9))
def test_activation_ranges(seed, shift, n):
    net = TorchFieldNetwork(TINY, rng=seed % 7)
    t, pos, d = ray_inputs(n=n, seed=seed)
    out = net(t, pos + shift, d)
    assert np.all(out.sigma.values >= 0)
    assert np.all((out.color.values > 0) & (out.color.values < 1))


def test_short_ray_allowed():
    net = TorchFieldNetwork(FieldConfig(channels=(4,), kernel_size=5, patch_size=1), rng=0)
    out = net(*ray_inputs(n=2))
    assert out.sigma.shape == (2, 1, 1)


def test_non_unit_direction_normalized(caplog):
    net = TorchFieldNetwork(TINY, rng=0)
    t, pos, d = ray_inputs()
    ref = net(t, pos, d)
    with caplog.at_level("WARNING"):
        out = net(t, pos, 3.0 * d)
    assert "non-unit" in caplog.text
    np.testing.assert_allclose(out.color.values, ref.color.values, atol=1e-15)


def test_order_awareness():
    perm = np.array([2, 0, 4, 1, 3])
    inv = np.argsort(perm)
    t, pos, d = ray_inputs(t=np.array([1.0, 1.1, 1.5, 2.6, 2.7]))
    # K=1 has no neighbours, so shuffling samples just shuffles outputs
    pointwise = TorchFieldNetwork(FieldConfig(channels=(8, 8), kernel_size=1, patch_size=3), rng=3)
    a = pointwise(t, pos, d).sigma.values
    np.testing.assert_allclose(pointwise(t[perm], pos[perm], d).sigma.values[inv], a, atol=1e-12)
    # with K=3 the windows change, so the outputs do too
    net = TorchFieldNetwork(TINY, rng=3)
    a = net(t, pos, d).sigma.values
    assert not np.allclose(net(t[perm], pos[perm], d).sigma.values[inv], a)


def test_density_only_skips_color_head():
    net = TorchFieldNetwork(TINY, rng=0)
    inputs = ray_inputs()
    with ad.recording() as full:
        net(*inputs)
    with ad.recording() as dens:
        out = net(*inputs, density_only=True)
    assert out.color is None
    assert len(dens) < len(full)
    color_params = {id(net.color_weight), id(net.color_bias)}
    assert not any(id(p) in color_params for node in dens.nodes for p in node.parents)


@pytest.mark.parametrize("train", [False, True])
def test_shrunken_network_grads(train):
    cfg = FieldConfig(channels=(8, 8), kernel_size=3, patch_size=3, pos_levels=1, dir_levels=1)
    net = TorchFieldNetwork(cfg, rng=5)
    for layer in net.layers:
        layer.running_mean = np.full(8, 0.1)
        layer.running_var = np.full(8, 0.7)
    t, pos, d = ray_inputs(n=5, seed=2)
    w = np.random.default_rng(9).normal(size=(5, 3, 3, 3))

    def build():
        out = net(t, pos, d, train=train, update_stats=False)
        return (out.color * w).sum() + out.sigma.sum() * 0.3

    assert check_grads(build, list(net.parameters().values())) < 1e-4


def test_eight_layer_composite_grads():
    # one channel per layer: 8 conv layers end to end, loss through compositing
    cfg = FieldConfig(channels=(1,) * 8, kernel_size=3, patch_size=1, pos_levels=0, dir_levels=0)
    net = TorchFieldNetwork(cfg, rng=11)
    for layer in net.layers:
        layer.norm_shift.values[:] = 0.4
    t, pos, d = ray_inputs(n=5, seed=4)
    deltas = np.append(np.diff(t), 0.2)
    gt = np.array([0.2, 0.5, 0.7])

    def build():
        out = net(t, pos, d, train=True, update_stats=False)
        tau = out.sigma.reshape(5) * deltas
        trans = ad.exp(-ad.cumsum(tau, exclusive=True))
        w = trans * (1.0 - ad.exp(-tau))
        rgb = (w.reshape(5, 1) * out.color.reshape(5, 3)).sum(axis=0)
        return ((rgb - gt) ** 2).sum()

    assert check_grads(build, list(net.parameters().values())) < 1e-4


def test_running_stats_update():
    net = TorchFieldNetwork(TINY, rng=0)
    t, pos, d = ray_inputs()
    before = net.layers[0].running_mean.copy()
    net(t, pos, d, train=True)
    after = net.layers[0].running_mean
    assert not np.array_equal(before, after)
    net(t, pos, d, train=False)
    np.testing.assert_array_equal(after, net.layers[0].running_mean)


def test_sync_semantics():
    pair = ModelPair.create(TINY, sync_period=3, strategy="synced", rng=0)
    snapshot = {k: p.values.copy() for k, p in pair.fine.parameters().items()}
    for k, p in pair.coarse.parameters().items():
        assert np.array_equal(p.values, snapshot[k]) and not p.requires_grad
    for p in pair.fine.parameters().values():
        p.values += 0.01
    sync_coarse_from_fine(pair)
    fine, coarse = pair.fine.parameters(), pair.coarse.parameters()
    assert max(np.max(np.abs(fine[k].values - coarse[k].values)) for k in fine) == 0.0
    inputs = ray_inputs()
    np.testing.assert_array_equal(pair.fine(*inputs).sigma.values, pair.coarse(*inputs).sigma.values)


def test_sync_shape_mismatch():
    a = ModelPair.create(TINY, strategy="synced", rng=0)
    a.coarse = TorchFieldNetwork(FieldConfig(channels=(4,), patch_size=3, pos_levels=2, dir_levels=1))
    with pytest.raises(ConfigError):
        sync_coarse_from_fine(a)


def test_strategies():
    shared = ModelPair.create(TINY, strategy="shared", rng=0)
    assert shared.coarse is shared.fine and list(shared.networks()) == ["fine"]
    sep = ModelPair.create(TINY, strategy="separate", rng=0)
    assert any(k.startswith("coarse/") for k in sep.trainable_parameters())
    with pytest.raises(ConfigError):
        ModelPair.create(TINY, strategy="mixed")


def test_fine_gets_grads_coarse_none():
    pair = ModelPair.create(TINY, strategy="synced", rng=0)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    with ad.recording() as tape:
        out = render_rays(pair, np.zeros((4, 3)), d, 1.0, 3.0, 8, 8, train=True, rng=rng)
        loss = out.fine_rgb.sum()
    coarse_ids = {id(p) for p in pair.coarse.parameters().values()}
    assert not any(id(p) in coarse_ids for node in tape.nodes for p in node.parents)
    ad.backward(loss)
    assert all(p.grad is not None for p in pair.fine.parameters().values())
    assert all(p.grad is None for p in pair.coarse.parameters().values())


@pytest.mark.parametrize("bad", [dict(kernel_size=2), dict(patch_size=4), dict(channels=())])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        FieldConfig(**bad)
