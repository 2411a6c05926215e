import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from torchunit import autodiff as ad
from torchunit.errors import ConfigError, FormatError
from torchunit.metrics import ssim_patch, weighted_mse
from torchunit.train import (
    AdamState,
    NaNAbort,
    TrainConfig,
    TrainingRays,
    TrainState,
    adam_step,
    clip_grad_norm,
    evaluate,
    load_checkpoint,
    parse_config_text,
    save_checkpoint,
    train,
    train_step,
)

from conftest import TINY_CONFIG


def tiny(**kw):
    return TrainConfig(**{**TINY_CONFIG, **kw})


# --- config ---------------------------------------------------------------------


def test_config_round_trip():
    cfg = tiny(lr=3e-4, use_ssim=False)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_parsing():
    cfg = TrainConfig.from_text("# comment\nstrategy = separate\nchannels = 8, 8\n\nlr = 1e-3  # inline\n")
    assert cfg.strategy == "separate" and cfg.channels == (8, 8) and cfg.lr == 1e-3


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="learning_rat"):
        parse_config_text("learning_rat = 0.1\n")


@pytest.mark.parametrize(
    "text", ["iterations = many\n", "strategy = mixed\n", "patch_size = 4\n", "n_coarse = 600\n"]
)
def test_bad_values(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_text(text)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**5))
def test_lr_monotone(a, b, decay):
    cfg = TrainConfig(lr_decay_steps=decay, iterations=1000)
    lo, hi = sorted((a, b))
    assert cfg.learning_rate(hi) <= cfg.learning_rate(lo)


def test_lr_endpoints():
    cfg = TrainConfig(iterations=20000)
    assert cfg.learning_rate(0) == 5e-4
    assert cfg.learning_rate(20000) == pytest.approx(5e-5, rel=1e-12)


# --- optimizer ------------------------------------------------------------------


def test_adam_zero_grad():
    p = {"w": ad.parameter([1.0, -2.0])}
    st_ = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
    assert p["w"].values.tolist() == [1.0, -2.0]


def test_adam_constant_grad_step():
    p = {"w": ad.parameter([0.0, 0.0])}
    st_ = AdamState.zeros_like(p)
    prev = p["w"].values.copy()
    for _ in range(200):
        adam_step(p, {"w": np.array([3.0, -0.01])}, st_, lr=1e-3)
        step = p["w"].values - prev
        prev = p["w"].values.copy()
    np.testing.assert_allclose(step, [-1e-3, 1e-3], rtol=1e-4)


def test_adam_quadratic_converges():
    p = {"x": ad.parameter([4.0])}
    st_ = AdamState.zeros_like(p)
    for k in range(5000):
        x = p["x"].values
        adam_step(p, {"x": 2 * (x - 1.5)}, st_, lr=1e-2)
        if abs(p["x"].values[0] - 1.5) < 1e-6:
            break
    assert abs(p["x"].values[0] - 1.5) < 1e-6 and k < 5000


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


# --- data and steps -------------------------------------------------------------


def test_crop_center_is_target_pixel(tiny_data):
    data = TrainingRays(tiny_data, 5)
    picks = np.arange(len(data))
    _, dirs, crops = data.batch(picks)
    k, j, i = data.candidates.T
    np.testing.assert_array_equal(crops[:, 2, 2], data.images[k, j, i])
    assert j.min() == 2 and j.max() == 13 and i.min() == 2


def test_first_loss_with_zero_heads(tiny_data):
    cfg = tiny()
    state = TrainState.create(cfg, tiny_data.root)
    for net in state.pair.networks().values():
        for p in (net.density_weight, net.density_bias, net.color_weight, net.color_bias):
            p.values[:] = 0.0
    data = TrainingRays(tiny_data, cfg.patch_size)
    twin = np.random.default_rng()
    twin.bit_generator.state = state.rng.bit_generator.state
    picks = twin.integers(0, len(data), size=cfg.batch_rays)
    gt = data.batch(picks)[2]
    black = np.zeros_like(gt)
    want = weighted_mse(black, gt).item() + (1.0 - ssim_patch(black, gt).item())
    assert train_step(state, data) == pytest.approx(want, abs=1e-12)


def test_synced_coarse_frozen_between_syncs(tiny_data):
    state = TrainState.create(tiny(sync_period=3), tiny_data.root)
    data = TrainingRays(tiny_data, 3)
    snap = lambda net: {k: p.values.copy() for k, p in net.parameters().items()}
    coarse0 = snap(state.pair.coarse)
    for it in range(1, 8):
        train_step(state, data)
        coarse, fine = snap(state.pair.coarse), snap(state.pair.fine)
        if it % 3 == 0:
            assert all(np.array_equal(coarse[k], fine[k]) for k in fine)
            coarse0 = coarse
        else:
            assert all(np.array_equal(coarse[k], coarse0[k]) for k in coarse)
            assert all(p.grad is None for p in state.pair.coarse.parameters().values())


@pytest.mark.parametrize("strategy", ["separate", "shared"])
def test_other_strategies_train(tiny_data, strategy):
    state = TrainState.create(tiny(strategy=strategy), tiny_data.root)
    data = TrainingRays(tiny_data, 3)
    losses = [train_step(state, data) for _ in range(3)]
    assert all(math.isfinite(v) for v in losses)
    if strategy == "separate":
        assert all(p.grad is not None for p in state.pair.coarse.parameters().values())


def test_identical_seeds_identical_losses(tiny_data):
    curves = []
    for _ in range(2):
        state = TrainState.create(tiny(), tiny_data.root)
        data = TrainingRays(tiny_data, 3)
        curves.append([train_step(state, data) for _ in range(5)])
    assert curves[0] == curves[1]


def test_nan_abort(tiny_data, tmp_path):
    state = TrainState.create(tiny(), tiny_data.root)
    state.pair.fine.density_bias.values[:] = math.nan
    with pytest.raises(NaNAbort) as err:
        train_step(state, TrainingRays(tiny_data, 3))
    assert set(err.value.batch) == {"origins", "directions", "ground_truth"}


# --- checkpoints ----------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["synced", "separate", "shared"])
def test_checkpoint_round_trip(tiny_data, tmp_path, strategy):
    state = TrainState.create(tiny(strategy=strategy), tiny_data.root)
    data = TrainingRays(tiny_data, 3)
    for _ in range(4):
        train_step(state, data)
    save_checkpoint(tmp_path / "a.tnrf", state)
    back = load_checkpoint(tmp_path / "a.tnrf")
    save_checkpoint(tmp_path / "b.tnrf", back)
    assert (tmp_path / "a.tnrf").read_bytes() == (tmp_path / "b.tnrf").read_bytes()
    assert back.iteration == 4 and back.config == state.config


def test_checkpoint_errors(tiny_data, tmp_path):
    path = tmp_path / "c.tnrf"
    save_checkpoint(path, TrainState.create(tiny(), tiny_data.root))
    raw = path.read_bytes()
    (tmp_path / "magic.tnrf").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "ver.tnrf").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    (tmp_path / "cut.tnrf").write_bytes(raw[: len(raw) // 2])
    for name, msg in [("magic", "magic"), ("ver", "version"), ("cut", "truncated")]:
        with pytest.raises(FormatError, match=msg):
            load_checkpoint(tmp_path / f"{name}.tnrf")


def test_resume_is_bitwise(tiny_data, tmp_path):
    # fixed decay horizon so the shorter first leg follows the same schedule
    cfg = tiny(iterations=501, eval_period=500, lr_decay_steps=1000)
    train(cfg, tiny_data, tmp_path / "full")
    train(cfg.replace(iterations=500), tiny_data, tmp_path / "part")
    train(cfg, tiny_data, tmp_path / "part", resume=tmp_path / "part" / "ckpt_000500.tnrf")
    full = (tmp_path / "full" / "loss.csv").read_text().splitlines()
    part = (tmp_path / "part" / "loss.csv").read_text().splitlines()
    assert full[501] == part[501] and full[501].startswith("501,")
    assert full == part


def test_train_outputs(tiny_data, tmp_path):
    out = tmp_path / "run"
    train(tiny(), tiny_data, out)
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "iter,psnr,ssim,wall_seconds"
    assert [r.split(",")[0] for r in rows[1:]] == ["3", "6"]
    assert all(r.endswith(",nan") for r in rows[1:])
    assert (out / "ckpt_000003.tnrf").is_file() and (out / "latest.tnrf").is_file()
    first = (out / "metrics.csv").read_bytes()
    train(tiny(), tiny_data, out)
    assert (out / "metrics.csv").read_bytes() == first


def test_evaluate_deterministic(tiny_data, tmp_path):
    state = TrainState.create(tiny(), tiny_data.root)
    a = evaluate(state, tiny_data, "test")
    b = evaluate(state, tiny_data, "test")
    assert a == b and len(a["views"]) == 2
    with pytest.raises(ConfigError):
        evaluate(state, tiny_data, "val")
