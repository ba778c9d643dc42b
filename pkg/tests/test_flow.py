import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rnavq import tensor as T
from rnavq.encoder import EncoderConfig
from rnavq.flow import (SCHEDULES, DecoderConfig, SamplerConfig, TerminalTimeError, VectorFieldNet, center_of_mass,
                        cfg_field, euler_integrate, flow_matching_loss, interpolate, project_zero_com,
                        sample_noise_zero_com, sde_integrate, vf_to_score)
from rnavq.model import ModelConfig, RnaAutoencoder
from rnavq.structure import synth_helix


def tiny_model(seed=0, atom_set="A1"):
    cfg = ModelConfig(atom_set, EncoderConfig(layers=1, hidden_dim=16, heads=2, pair_dim=4, window=4, dist_bins=8),
                      DecoderConfig(layers=1, hidden_dim=16, heads=2, pair_dim=4, dist_bins=8, time_freqs=8),
                      (8, 6, 5))
    return RnaAutoencoder(cfg, np.random.default_rng(seed), scale=5.0)


# ---------------------------------------------------------------- noise / path

def test_noise_zero_com():
    x = sample_noise_zero_com((7, 3, 3), np.random.default_rng(0))
    assert np.abs(center_of_mass(x)).max() < 1e-12


def test_noise_variance_shrinks_by_projection():
    x = sample_noise_zero_com((40_000, 2, 3, 3), np.random.default_rng(1))
    assert x.var(axis=0).mean() == pytest.approx(1 - 1 / 6, rel=0.01)


def test_single_point_noise_is_zero():
    assert np.array_equal(sample_noise_zero_com((1, 1, 3), np.random.default_rng(0)), np.zeros((1, 1, 3)))


def test_interpolate_examples():
    rng = np.random.default_rng(0)
    x1, x0 = project_zero_com(rng.standard_normal((4, 2, 3))), project_zero_com(rng.standard_normal((4, 2, 3)))
    assert np.array_equal(interpolate(x1, x0, 0.0), x0)
    assert np.array_equal(interpolate(x1, x0, 1.0), x1)
    a = np.array([[[2.0, 0, 0]]])
    b = np.array([[[0.0, 2, 0]]])
    assert np.array_equal(interpolate(a, b, 0.5), [[[1.0, 1.0, 0.0]]])
    assert np.abs(center_of_mass(interpolate(x1, x0, 0.3))).max() < 1e-15
    with pytest.raises(T.ShapeError):
        interpolate(x1, x0[:2], 0.5)


# ---------------------------------------------------------------- loss

def test_loss_zero_for_exact_target_and_closed_form_for_zero_output():
    rng = np.random.default_rng(0)
    target = rng.standard_normal((5, 2, 3))
    mask = np.ones((5, 2), bool)
    assert flow_matching_loss(T.Tensor(target), target, mask).item() == 0.0
    expected = (target ** 2).sum(-1).mean()
    assert flow_matching_loss(T.Tensor(np.zeros_like(target)), target, mask).item() == pytest.approx(expected, 1e-14)


def test_loss_ignores_masked_atoms():
    target = np.ones((2, 2, 3))
    mask = np.array([[True, False], [True, True]])
    v = np.zeros_like(target)
    v[0, 1] = 100.0
    assert flow_matching_loss(T.Tensor(v), target, mask).item() == pytest.approx(3.0)
    with pytest.raises(ValueError):
        flow_matching_loss(T.Tensor(v), target, np.zeros_like(mask))


def test_full_dropout_makes_loss_independent_of_tokens():
    m = tiny_model()
    s = synth_helix(8, tag="A1", rng=np.random.default_rng(0))
    a = m.flow_loss(s, np.random.default_rng(3), cond_drop_prob=1.0).item()
    for p in m.encoder.parameters():
        p.data += 1.0
    b = m.flow_loss(s, np.random.default_rng(3), cond_drop_prob=1.0).item()
    assert a == b


# ---------------------------------------------------------------- guidance

def test_cfg_examples():
    rng = np.random.default_rng(0)
    vc, vu = rng.standard_normal((3, 2, 3)), rng.standard_normal((3, 2, 3))
    assert cfg_field(vc, vu, 0.0) is vc
    assert np.array_equal(cfg_field(vc, vc.copy(), 2.5), vc)
    assert cfg_field(np.array(2.0), np.array(1.0), 1.0) == 3.0
    with pytest.raises(T.ShapeError):
        cfg_field(vc, vu[:1], 1.0)


def test_model_guidance_zero_is_bitwise():
    m = tiny_model()
    s = synth_helix(6, tag="A1")
    cond = m.condition(s)
    x = sample_noise_zero_com((6, 1, 3), np.random.default_rng(0))
    assert np.array_equal(m.field(cond, 0.0)(x, 0.3), m.velocity(x, 0.3, cond).data)


# ---------------------------------------------------------------- samplers

@pytest.mark.parametrize("n", [1, 3, 10])
def test_euler_constant_field(n):
    rng = np.random.default_rng(n)
    x0 = project_zero_com(rng.standard_normal((5, 1, 3)))
    c = project_zero_com(rng.standard_normal((5, 1, 3)))
    x1 = euler_integrate(lambda x, t: c, x0, n)
    assert np.abs(x1 - (x0 + c)).max() < 1e-13


def test_euler_single_step():
    x0 = project_zero_com(np.random.default_rng(0).standard_normal((4, 1, 3)))
    out = euler_integrate(lambda x, t: -x * (1.0 + t), x0, 1)
    assert np.array_equal(out, project_zero_com(x0 + -x0 * 1.0))


def test_euler_first_order_on_linear_field():
    x0 = project_zero_com(np.random.default_rng(0).standard_normal((6, 2, 3)))
    ns = np.array([10, 20, 40, 80, 160])
    errs = [np.abs(euler_integrate(lambda x, t: -x, x0, n) - x0 * math.exp(-1)).max() for n in ns]
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_sde_degenerates_to_euler_bitwise():
    m = tiny_model()
    cond = m.condition(synth_helix(6, tag="A1"))
    a = m.sample(cond, SamplerConfig(steps=8), np.random.default_rng(11))
    x0 = sample_noise_zero_com((6, 1, 3), np.random.default_rng(11))
    b = sde_integrate(m.field(cond), x0, SamplerConfig(steps=8, eta=0.0, gamma=0.0), np.random.default_rng(99))
    assert np.array_equal(a, b * m.scale)


def test_sde_seeds_differ():
    x0 = np.zeros((5, 1, 3))
    cfg = SamplerConfig(steps=10, gamma=0.5)
    a = sde_integrate(lambda x, t: -x, x0, cfg, np.random.default_rng(0))
    b = sde_integrate(lambda x, t: -x, x0, cfg, np.random.default_rng(1))
    assert np.abs(a - b).max() > 0


def test_ou_stationary_variance():
    eta, gamma, n = 9.0, 1.0, 1000
    a = 1.0 + eta
    dt = 1.0 / n
    x0 = np.zeros((10_000, 4, 1, 3))
    cfg = SamplerConfig(steps=n, eta=eta, gamma=gamma, terminal=1.0)
    x = sde_integrate(lambda x, t: -x, x0, cfg, np.random.default_rng(0), score=lambda x, t, v: -x)
    # discrete stationary variance of x' = (1 - a dt) x + sqrt(2 gamma dt) xi, then the CoM projection
    expected = 2 * gamma * dt / (1 - (1 - a * dt) ** 2) * (1 - 1 / 4)
    assert x.var(axis=0).mean() == pytest.approx(expected, rel=0.05)
    assert expected == pytest.approx(gamma / a * 0.75, rel=0.01)


def test_sde_terminal_regime_is_deterministic():
    cfg = SamplerConfig(steps=10, gamma=1.0, eta=1.0, terminal=0.0)
    x0 = project_zero_com(np.random.default_rng(0).standard_normal((4, 1, 3)))
    a = sde_integrate(lambda x, t: -x, x0, cfg, np.random.default_rng(0))
    assert np.array_equal(a, euler_integrate(lambda x, t: -x, x0, 10))


@pytest.mark.parametrize("name", sorted(SCHEDULES))
def test_schedules_start_at_one(name):
    assert SCHEDULES[name](0.0) == 1.0


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0).validate()
    with pytest.raises(ValueError):
        SamplerConfig(gamma=-1).validate()
    with pytest.raises(ValueError):
        SamplerConfig(schedule="exp").validate()


def test_com_stays_zero_along_model_trajectories():
    m = tiny_model()
    cond = m.condition(synth_helix(7, tag="A1"))
    worst = []
    cfg = SamplerConfig(steps=10, gamma=0.3, eta=0.2)
    for k in range(5):
        m.sample(cond, cfg, np.random.default_rng(k), on_step=lambda i, t, x: worst.append(np.abs(center_of_mass(x)).max()))
    assert len(worst) == 50 and max(worst) < 1e-6


# ---------------------------------------------------------------- score

def test_score_at_zero_is_negative_x():
    x = np.random.default_rng(0).standard_normal((3, 1, 3))
    v = np.random.default_rng(1).standard_normal((3, 1, 3))
    assert np.array_equal(vf_to_score(v, x, 0.0), -x)


@given(st.sampled_from([0.0, 0.25, 0.5, 0.75, 0.9]), st.integers(0, 10_000))
def test_exact_field_gives_negative_noise(t, seed):
    rng = np.random.default_rng(seed)
    x1, x0 = rng.standard_normal((2, 5, 2, 3)) * 10
    s = vf_to_score(x1 - x0, interpolate(x1, x0, t), t)
    assert np.abs(s + x0).max() < 1e-9


def test_score_is_noise_scaled_gaussian_path_score():
    rng = np.random.default_rng(5)
    x1, x0 = rng.standard_normal((2, 4, 1, 3))
    t = 0.6
    x_t = interpolate(x1, x0, t)
    true_score = -(x_t - t * x1) / (1 - t) ** 2
    assert np.allclose(vf_to_score(x1 - x0, x_t, t) / (1 - t), true_score, atol=1e-12)


def test_score_guard_near_terminal():
    with pytest.raises(TerminalTimeError):
        vf_to_score(np.zeros(3), np.zeros(3), 0.9999)


# ---------------------------------------------------------------- network

def test_vector_field_shapes_and_null_condition():
    rng = np.random.default_rng(0)
    net = VectorFieldNet(DecoderConfig(layers=1, hidden_dim=8, heads=2, pair_dim=4, dist_bins=8, time_freqs=4),
                         3, 5, 1, rng)
    x = project_zero_com(rng.standard_normal((6, 3, 3)))
    assert net(x, 0.2, T.Tensor(rng.standard_normal((6, 5)))).shape == (6, 3, 3)
    assert net(x, 0.2, None).shape == (6, 3, 3)


def test_decoder_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(hidden_dim=10, heads=3).validate()
    with pytest.raises(ValueError):
        DecoderConfig(min_denominator=0.0).validate()


def test_reconstruct_keeps_shape_and_is_seeded():
    m = tiny_model(atom_set="A10")
    s = synth_helix(6, tag="A10")
    a = m.reconstruct(s, SamplerConfig(steps=4), np.random.default_rng(0))
    b = m.reconstruct(s, SamplerConfig(steps=4), np.random.default_rng(0))
    assert a.coords.shape == s.coords.shape and np.array_equal(a.coords, b.coords)
