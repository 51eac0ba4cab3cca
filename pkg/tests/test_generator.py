"""Layered generator: composition exactness, shapes, parameter accounting."""

import numpy as np
import pytest

import lrgan.diffcore as dc
from lrgan import stn
from lrgan.errors import ConfigError
from lrgan.generator import (DcganBaseline, LayeredGenerator, ModelConfig,
                             compose, parse_arch, preset)
from lrgan.training import Discriminator, build_models


def small_config(**overrides):
    kwargs = dict(
        dataset="mnist_one", image_size=16, timesteps=2, s_min=1.2,
        bg_arch="(32)4c-(16)4c2s-(3)4c2s",
        trunk_arch="(64)4c-(32)4c2s",
        disc_arch="(16)4c2s-(32)4c2s-(32)4p4s-1",
        z_dim=20, hidden_dim=24)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def make_gen(seed=0, **overrides):
    gen = LayeredGenerator(small_config(**overrides), np.random.default_rng(seed))
    list(gen.named_parameters())
    return gen


# ---------------------------------------------------------------------------
# architecture strings
# ---------------------------------------------------------------------------

def test_parse_arch_tokens():
    specs = parse_arch("(256)4c-(128)4c2s-(64)4p4s-1")
    assert [(s.channels, s.kernel, s.kind, s.stride, s.padding) for s in specs] == [
        (256, 4, "c", 1, 0), (128, 4, "c", 2, 1), (64, 4, "p", 4, 0)]
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_arch("(64)banana")


def test_presets_match_published_layer_strings():
    one = preset("mnist_one")
    assert one.bg_arch == "(256)4c-(128)4c2s-(64)4c2s-(3)4c2s"
    assert one.trunk_arch == "(512)4c-(256)4c2s-(128)4c2s"
    assert one.disc_arch == "(64)4c2s-(128)4c2s-(256)4c2s-(256)4p4s-1"
    assert (one.image_size, one.timesteps, one.s_min) == (32, 2, 1.2)
    two = preset("mnist_two")
    assert (two.image_size, two.timesteps, two.s_min) == (64, 3, 2.0)
    assert preset("cub200").image_size == 64
    with pytest.raises(ConfigError, match="unknown dataset"):
        preset("imagenet")


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def test_background_shape_and_range():
    gen = make_gen()
    rng = np.random.default_rng(0)
    x0, state = gen.background_step(gen.sample_z(rng, 4)[0])
    assert x0.shape == (4, 3, 16, 16)
    assert np.all(np.abs(x0.data) < 1.0)  # tanh output
    assert state.steps_done == 1


def test_background_deterministic():
    outs = []
    for _ in range(2):
        dc.reset_graph()
        gen = make_gen(seed=3)
        z = gen.sample_z(np.random.default_rng(5), 2)
        outs.append(gen.generate(z)[-1].composite.data.copy())
    assert np.array_equal(outs[0], outs[1])


def test_foreground_before_background_errors():
    gen = make_gen()
    state = gen.init_state(2)
    with pytest.raises(dc.GraphError, match="background"):
        gen.foreground_step(dc.constant(np.zeros((2, 20), dtype=np.float32)), state,
                            dc.constant(np.zeros((2, 3, 16, 16), dtype=np.float32)))


def test_mask_strictly_inside_unit_interval():
    gen = make_gen()
    records = gen.generate(gen.sample_z(np.random.default_rng(1), 4))
    mask = records[1].mask.data
    assert np.all(mask > 0.0) and np.all(mask < 1.0)


def test_generate_wrong_z_count():
    gen = make_gen()
    with pytest.raises(ConfigError, match="noise vectors"):
        gen.generate(gen.sample_z(np.random.default_rng(0), 2)[:1])


def test_single_timestep_is_background_only():
    gen = make_gen(timesteps=1)
    records = gen.generate(gen.sample_z(np.random.default_rng(2), 3))
    assert len(records) == 1
    assert records[0].is_background


def test_three_timesteps_two_foreground_records():
    gen = make_gen(timesteps=3)
    records = gen.generate(gen.sample_z(np.random.default_rng(2), 2))
    assert len(records) == 3
    assert records[0].is_background
    assert not records[1].is_background and not records[2].is_background
    # context embedding feeds the second foreground step
    assert records[2].fused_input is not None


# ---------------------------------------------------------------------------
# composition (Eq.-style pasting identity)
# ---------------------------------------------------------------------------

def test_compose_recomputation_bit_identical():
    gen = make_gen()
    records = gen.generate(gen.sample_z(np.random.default_rng(3), 4))
    rec = records[1]
    m_hat = rec.mask_warped.data
    f_hat = rec.appearance_warped.data
    x_prev = records[0].composite.data
    recomputed = m_hat * f_hat + (1.0 - m_hat) * x_prev
    assert np.array_equal(recomputed, rec.composite.data)


def test_compose_mask_zero_keeps_canvas():
    rng = np.random.default_rng(4)
    x_prev = dc.constant(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    f = dc.constant(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    m = dc.constant(np.zeros((2, 1, 8, 8), dtype=np.float32))
    out, _, _ = compose(x_prev, f, m, pose=None)
    assert np.array_equal(out.data, x_prev.data)


def test_compose_mask_one_identity_pose_gives_appearance():
    rng = np.random.default_rng(5)
    x_prev = dc.constant(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    f = dc.constant(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    m = dc.constant(np.ones((2, 1, 8, 8), dtype=np.float32))
    out, _, _ = compose(x_prev, f, m, stn.identity_pose(2))
    assert np.abs(out.data - f.data).max() < 1e-6


def test_compose_uniform_half_mask_blends():
    x_prev = dc.constant(np.zeros((1, 3, 4, 4), dtype=np.float32))
    f = dc.constant(np.ones((1, 3, 4, 4), dtype=np.float32))
    m = dc.constant(np.full((1, 1, 4, 4), 0.5, dtype=np.float32))
    out, _, _ = compose(x_prev, f, m, pose=None)
    assert np.all(out.data == 0.5)


def test_compose_convex_combination_in_extent():
    rng = np.random.default_rng(6)
    x_prev = dc.constant(rng.uniform(-1, 1, size=(2, 3, 9, 9)).astype(np.float32))
    f = dc.constant(rng.uniform(-1, 1, size=(2, 3, 9, 9)).astype(np.float32))
    m = dc.constant(rng.uniform(0.01, 0.99, size=(2, 1, 9, 9)).astype(np.float32))
    raw = dc.constant(rng.normal(size=(2, 6)).astype(np.float32))
    pose = stn.constrain_pose(raw, 1.2)
    out, f_hat, m_hat = compose(x_prev, f, m, pose)
    lo = np.minimum(f_hat.data, x_prev.data) - 1e-6
    hi = np.maximum(f_hat.data, x_prev.data) + 1e-6
    assert np.all(out.data >= lo) and np.all(out.data <= hi)


def test_compose_out_of_extent_keeps_canvas():
    rng = np.random.default_rng(7)
    x_prev = dc.constant(rng.normal(size=(1, 3, 17, 17)).astype(np.float32))
    f = dc.constant(rng.normal(size=(1, 3, 17, 17)).astype(np.float32))
    m = dc.constant(rng.uniform(0.2, 0.9, size=(1, 1, 17, 17)).astype(np.float32))
    pose = dc.constant(np.array([[4.0, 0, 0, 0, 4.0, 0]], dtype=np.float32))
    out, _, m_hat = compose(x_prev, f, m, pose)
    border = np.s_[0, :, 0:2, :]
    assert np.all(m_hat.data[0, :, 0:2, :] == 0.0)
    np.testing.assert_array_equal(out.data[border], x_prev.data[border])


# ---------------------------------------------------------------------------
# recurrence and gradients
# ---------------------------------------------------------------------------

def test_foreground_steps_share_parameters():
    gen = make_gen(timesteps=3)
    # structural sharing: the same module objects serve every step, so the
    # parameter set is independent of the number of unrolled steps
    names = {name for name, _ in gen.named_parameters()}
    gen2 = make_gen(timesteps=3)
    assert {name for name, _ in gen2.named_parameters()} == names


def test_gradient_reaches_first_noise_vector():
    gen = make_gen()
    z_list = gen.sample_z(np.random.default_rng(8), 2)
    z_list[0].requires_grad = True
    records = gen.generate(z_list)
    dc.backward((records[-1].composite * records[-1].composite).mean())
    assert z_list[0].grad is not None
    assert np.abs(z_list[0].grad).max() > 0


def test_gradient_reaches_all_generator_parameters():
    # with two timesteps the context embedding is never consumed, so its
    # parameters legitimately see no gradient; every other parameter must
    gen = make_gen()
    records = gen.generate(gen.sample_z(np.random.default_rng(9), 2))
    dc.backward((records[-1].composite * records[-1].composite).mean())
    missing = [name for name, p in gen.named_parameters() if p.grad is None]
    assert all(name.startswith("context_embed.") for name in missing), missing

    dc.reset_graph()
    gen3 = make_gen(timesteps=3)
    records = gen3.generate(gen3.sample_z(np.random.default_rng(9), 2))
    dc.backward((records[-1].composite * records[-1].composite).mean())
    missing = [name for name, p in gen3.named_parameters() if p.grad is None]
    assert missing == []


# ---------------------------------------------------------------------------
# parameter accounting against the published sizes
# ---------------------------------------------------------------------------

def test_parameter_count_one_digit_model():
    gen, disc = build_models(preset("mnist_one"), seed=0)
    total = gen.parameter_count() + disc.parameter_count()
    assert abs(total - 5.25e6) / 5.25e6 < 0.02, total


def test_parameter_count_single_shot_baseline():
    config = preset("mnist_one")
    baseline = DcganBaseline(config, np.random.default_rng(0))
    disc = Discriminator(config.disc_arch, np.random.default_rng(1))
    total = baseline.parameter_count() + disc.parameter_count()
    assert abs(total - 4.11e6) / 4.11e6 < 0.02, total


def test_background_channels_half_of_trunk():
    for name in ("mnist_one", "mnist_two", "cifar10", "cub200"):
        config = preset(name)
        bg = parse_arch(config.bg_arch)
        trunk = parse_arch(config.trunk_arch)
        for b, t in zip(bg, trunk):
            assert b.channels * 2 == t.channels
