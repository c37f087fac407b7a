"""Conditional GAN: shapes, losses, gradients, checkpoints and training contract."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lidar2photo.lidar_model import SensorConfig
from lidar2photo.pix2pix import (PRESETS, Checkpoint, CheckpointFormatError, DiscriminatorConfig,
                                 GeneratorConfig, PatchDiscriminator, TrainConfig, TrainingError, UNetGenerator,
                                 bce_logits, build_models, discriminator_forward, discriminator_loss,
                                 generator_forward, generator_loss, load_checkpoint, parameter_count, predict,
                                 preset, save_checkpoint, train, write_epoch_log)
from lidar2photo.projection import ChannelMode, RasterImage, project_frame
from lidar2photo.scene import generate_scene, render_camera, simulate_lidar
from oracles import generator_param_oracle, micro_gradient_errors

# generator weights for depth 6, base 64, two input channels
GEN_PARAMS_D6_B64_2IN = 29_240_707


def pairs_for(mode, size, seeds):
    cfg = SensorConfig()
    out = []
    for s in seeds:
        scene = generate_scene(s)
        x = project_frame(simulate_lidar(scene, cfg, 8), cfg, mode, (size, size))
        out.append((x, render_camera(scene, (size, size), cfg)[0]))
    return out


def bce_scalar(z, label):
    # numerically stable log(1 + e^-|z|) form
    return max(z, 0.0) - z * label + math.log1p(math.exp(-abs(z)))


@pytest.mark.parametrize("size,side", [(256, 30), (64, 6), (16, 6)])
def test_patch_map_side(size, side):
    dcfg = DiscriminatorConfig.for_image(5, size, 8)
    assert dcfg.patch_side(size) == side
    disc = PatchDiscriminator(dcfg)
    with torch.no_grad():
        out = discriminator_forward(disc, torch.zeros(1, 2, size, size), torch.zeros(1, 3, size, size))
    assert out.shape == (1, 1, side, side)


@pytest.mark.parametrize("cin", [1, 2])
def test_generator_output_shape_and_bounds(cin):
    gen = UNetGenerator(GeneratorConfig(cin, 3, 8, 6)).eval()
    with torch.no_grad():
        out = generator_forward(gen, torch.zeros(cin, 64, 64))
    assert out.shape == (1, 3, 64, 64)
    assert torch.isfinite(out).all() and out.abs().max() <= 1


def test_shape_mismatches_rejected():
    gen = UNetGenerator(GeneratorConfig(2, 3, 4, 4))
    with pytest.raises(ValueError, match="expects"):
        generator_forward(gen, torch.zeros(1, 16, 16))
    with pytest.raises(ValueError, match="expects"):
        generator_forward(gen, torch.zeros(2, 32, 32))
    disc = PatchDiscriminator(DiscriminatorConfig.for_image(5, 16, 4))
    with pytest.raises(ValueError, match="aligned"):
        discriminator_forward(disc, torch.zeros(2, 16, 16), torch.zeros(3, 8, 8))
    with pytest.raises(ValueError, match="channels"):
        discriminator_forward(disc, torch.zeros(1, 16, 16), torch.zeros(3, 16, 16))


def test_parameter_count_matches_layer_arithmetic():
    for cin, base, depth in [(1, 4, 4), (2, 8, 5), (2, 16, 7), (1, 64, 6)]:
        assert parameter_count(UNetGenerator(GeneratorConfig(cin, 3, base, depth))) == \
            generator_param_oracle(cin, base, depth)
    gen = UNetGenerator(GeneratorConfig(2, 3, 64, 6))
    assert parameter_count(gen) == generator_param_oracle(2, 64, 6) == GEN_PARAMS_D6_B64_2IN


def test_zero_logits_give_ln2():
    z = torch.zeros(1, 1, 6, 6)
    assert bce_logits(z, 1.0).item() == pytest.approx(math.log(2), abs=1e-7)
    assert discriminator_loss(z, z).item() == pytest.approx(math.log(2), abs=1e-7)
    img = torch.rand(1, 3, 16, 16)
    assert generator_loss(z, img, img, 100.0).item() == pytest.approx(math.log(2), abs=1e-7)


def test_l1_term_vanishes_when_fake_equals_target():
    img = torch.rand(1, 3, 16, 16)
    z = torch.full((1, 1, 6, 6), 3.0)
    assert generator_loss(z, img, img, 100.0).item() == bce_logits(z, 1.0).item()


def test_large_logit_limit():
    assert discriminator_loss(torch.full((1, 1, 6, 6), 20.0), torch.full((1, 1, 6, 6), -20.0)).item() < 1e-3


def test_losses_match_scalar_oracle(rng):
    for _ in range(20):
        real = rng.normal(0, 3, (1, 1, 6, 6))
        fake_logits = rng.normal(0, 3, (1, 1, 6, 6))
        fake = rng.uniform(-1, 1, (1, 3, 8, 8))
        target = rng.uniform(-1, 1, (1, 3, 8, 8))
        lam = float(rng.uniform(0, 200))
        d_exp = 0.5 * (np.mean([bce_scalar(z, 1.0) for z in real.ravel()])
                       + np.mean([bce_scalar(z, 0.0) for z in fake_logits.ravel()]))
        g_exp = np.mean([bce_scalar(z, 1.0) for z in fake_logits.ravel()]) + lam * np.mean(np.abs(fake - target))
        assert discriminator_loss(real, fake_logits).item() == pytest.approx(d_exp, abs=1e-6)
        assert generator_loss(fake_logits, fake, target, lam).item() == pytest.approx(g_exp, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.lists(st.floats(-50, 50), min_size=4, max_size=4),
       st.floats(0, 1000))
def test_losses_are_non_negative(a, b, lam):
    a, b = np.array(a).reshape(1, 1, 2, 2), np.array(b).reshape(1, 1, 2, 2)
    assert discriminator_loss(a, b).item() >= 0
    assert generator_loss(a, b, a, lam).item() >= 0


def test_gradients_match_finite_differences():
    g_err, d_err = micro_gradient_errors(10, seed=0)
    assert g_err < 1e-3 and d_err < 1e-3


def test_gradients_at_training_init_with_small_step():
    g_err, d_err = micro_gradient_errors(10, seed=1, gain=0.02, h=1e-5)
    assert g_err < 1e-3 and d_err < 1e-3


def test_presets():
    assert (PRESETS["exp1"].mode.channels, PRESETS["exp1"].epochs, PRESETS["exp1"].batch_size) == (1, 50, 1)
    assert (PRESETS["exp2"].mode.channels, PRESETS["exp2"].epochs, PRESETS["exp2"].batch_size) == (2, 40, 1)
    assert PRESETS["exp2"].lambda_l1 == 100 and PRESETS["exp2"].learning_rate == 2e-4
    assert preset("exp2", epochs=3).epochs == 3
    with pytest.raises(ValueError, match="unknown preset"):
        preset("exp3")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=4)
    with pytest.raises(ValueError):
        TrainConfig(lambda_l1=-1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def small_cfg(**kw):
    return TrainConfig(**{"epochs": 2, "base_filters": 4, "seed": 3, **kw})


def test_epochs_zero_returns_initialization():
    pairs = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [1, 2])
    result = train(pairs, small_cfg(epochs=0))
    gen, disc = build_models(small_cfg(), 16)
    assert result.final == result.initial == Checkpoint.capture(gen, disc, 0, float("nan"))
    assert result.history == []


def test_training_is_deterministic_and_records_history():
    pairs = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [1, 2, 3])
    val = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [4])
    a = train(pairs, small_cfg(epochs=3), val_pairs=val)
    b = train(pairs, small_cfg(epochs=3), val_pairs=val)
    assert a.history == b.history
    assert a.final == b.final
    assert [s.epoch for s in a.history] == [1, 2, 3]
    assert a.best.val_l1 == min(s.val_l1 for s in a.history)
    assert a.final.epoch == 3


def test_training_changes_weights_and_logs(tmp_path):
    pairs = pairs_for(ChannelMode.REFLECTANCE, 16, [1, 2])
    result = train(pairs, small_cfg(mode="exp1"))
    assert result.final != result.initial
    write_epoch_log(tmp_path / "log.csv", result.history)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,d_loss,g_loss,g_l1,val_l1" and len(lines) == 3


def test_training_rejects_bad_data():
    two = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [1])
    with pytest.raises(ValueError, match="empty"):
        train([], small_cfg())
    with pytest.raises(ValueError, match="mode"):
        train(two, small_cfg(mode="exp1"))
    mixed = two + pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 32, [2])
    with pytest.raises(ValueError, match="shape"):
        train(mixed, small_cfg())


def test_non_finite_loss_aborts():
    pairs = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [1])
    with pytest.raises(TrainingError, match="non-finite"):
        train(pairs, small_cfg(learning_rate=1e30))


def test_predict_is_deterministic_and_shaped():
    pairs = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [1, 2])
    ck = train(pairs, small_cfg()).final
    p1, p2 = predict(ck, pairs[0][0]), predict(ck, pairs[0][0])
    assert p1 == p2 and p1.data.shape == (3, 16, 16)
    with pytest.raises(ValueError, match="expects"):
        predict(ck, RasterImage(np.zeros((1, 16, 16), dtype=np.float32)))


def test_checkpoint_round_trip(tmp_path):
    pairs = pairs_for(ChannelMode.REFLECTANCE_DISTANCE, 16, [1, 2])
    ck = train(pairs, small_cfg(), val_pairs=pairs[:1]).final
    path = tmp_path / "m.l2ck"
    save_checkpoint(path, ck)
    loaded = load_checkpoint(path)
    assert loaded == ck
    assert predict(loaded, pairs[1][0]) == predict(ck, pairs[1][0])
    save_checkpoint(tmp_path / "again.l2ck", loaded)
    assert (tmp_path / "again.l2ck").read_bytes() == path.read_bytes()


def test_checkpoint_format_errors(tmp_path):
    pairs = pairs_for(ChannelMode.REFLECTANCE, 16, [1])
    ck = train(pairs, small_cfg(mode="exp1", epochs=0)).final
    path = tmp_path / "m.l2ck"
    save_checkpoint(path, ck)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)
