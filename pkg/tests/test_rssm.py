"""Latent dynamics core: transitions, rollouts, and KL machinery."""

import math

import numpy as np
import pytest
import torch

from dreamsiam.rssm import (RSSM, DiagGaussian, LatentState, balanced_kl,
                            flatten_states, kl_diag_gaussian, stack_pairs)

ACTION_DIM = 2
EMBED_DIM = 12


def make_rssm(seed=0, dtype=torch.float64, deter=16, stoch=4, hidden=16):
    torch.manual_seed(seed)
    return RSSM(ACTION_DIM, EMBED_DIM, deter, stoch, hidden, min_std=0.1).to(dtype)


def gaussian(mean, std):
    return DiagGaussian(torch.as_tensor(mean, dtype=torch.float64),
                        torch.as_tensor(std, dtype=torch.float64))


# ----------------------------------------------------------------------
# initial_state
# ----------------------------------------------------------------------

def test_initial_state_zeros():
    rssm = make_rssm()
    state = rssm.initial_state(1)
    assert state.deter.shape == (1, 16)
    assert state.stoch.shape == (1, 4)
    assert torch.all(state.deter == 0) and torch.all(state.stoch == 0)
    assert torch.all(state.dist.mean == 0)
    assert torch.all(state.dist.std == 0.1)


def test_initial_state_batched_and_pure():
    rssm = make_rssm()
    a = rssm.initial_state(50)
    b = rssm.initial_state(50)
    assert a.deter.shape[0] == 50
    assert torch.equal(a.deter, b.deter) and torch.equal(a.stoch, b.stoch)


def test_initial_state_rejects_bad_batch():
    rssm = make_rssm()
    with pytest.raises(ValueError):
        rssm.initial_state(0)


# ----------------------------------------------------------------------
# prior_step / posterior_step
# ----------------------------------------------------------------------

def test_prior_step_deterministic_under_seed():
    rssm = make_rssm()
    prev = rssm.initial_state(3)
    action = torch.randn(3, ACTION_DIM, dtype=torch.float64)
    out1 = rssm.prior_step(prev, action, torch.Generator().manual_seed(7))
    out2 = rssm.prior_step(prev, action, torch.Generator().manual_seed(7))
    assert torch.equal(out1[1].stoch, out2[1].stoch)
    assert torch.equal(out1[0].mean, out2[0].mean)


def test_prior_step_std_clamped():
    rssm = make_rssm()
    prev = rssm.initial_state(8)
    action = 100.0 * torch.randn(8, ACTION_DIM, dtype=torch.float64)
    prior, _ = rssm.prior_step(prev, action)
    assert torch.all(prior.std >= rssm.min_std)


def test_prior_step_rejects_wrong_action_dim():
    rssm = make_rssm()
    with pytest.raises(ValueError):
        rssm.prior_step(rssm.initial_state(1), torch.zeros(1, ACTION_DIM + 1, dtype=torch.float64))


def test_prior_step_batch_matches_loop():
    rssm = make_rssm()
    batch = 5
    prev = rssm.initial_state(batch)
    torch.manual_seed(1)
    action = torch.randn(batch, ACTION_DIM, dtype=torch.float64)
    noise = torch.randn(batch, rssm.stoch_dim, dtype=torch.float64)
    prior, state = rssm.prior_step(prev, action, noise=noise)
    for i in range(batch):
        prev_i = LatentState(prev.deter[i:i + 1], prev.stoch[i:i + 1],
                             DiagGaussian(prev.dist.mean[i:i + 1], prev.dist.std[i:i + 1]))
        prior_i, state_i = rssm.prior_step(prev_i, action[i:i + 1], noise=noise[i:i + 1])
        assert torch.allclose(prior.mean[i:i + 1], prior_i.mean, atol=1e-12)
        assert torch.allclose(state.stoch[i:i + 1], state_i.stoch, atol=1e-12)


def test_posterior_prior_part_matches_prior_step():
    rssm = make_rssm()
    prev = rssm.initial_state(2)
    torch.manual_seed(2)
    action = torch.randn(2, ACTION_DIM, dtype=torch.float64)
    embed = torch.randn(2, EMBED_DIM, dtype=torch.float64)
    pair = rssm.posterior_step(prev, action, embed, torch.Generator().manual_seed(0))
    prior, _ = rssm.prior_step(prev, action, torch.Generator().manual_seed(0))
    assert torch.equal(pair.prior.mean, prior.mean)
    assert torch.equal(pair.prior.std, prior.std)


def test_posterior_zero_embed_is_finite_and_clamped():
    rssm = make_rssm()
    prev = rssm.initial_state(2)
    action = torch.zeros(2, ACTION_DIM, dtype=torch.float64)
    pair = rssm.posterior_step(prev, action, torch.zeros(2, EMBED_DIM, dtype=torch.float64))
    assert torch.isfinite(pair.posterior.mean).all()
    assert torch.all(pair.posterior.std >= rssm.min_std)
    assert pair.state.dist is pair.posterior


def test_posterior_rejects_wrong_embed_dim():
    rssm = make_rssm()
    with pytest.raises(ValueError):
        rssm.posterior_step(rssm.initial_state(1),
                            torch.zeros(1, ACTION_DIM, dtype=torch.float64),
                            torch.zeros(1, EMBED_DIM + 3, dtype=torch.float64))


# ----------------------------------------------------------------------
# rollouts
# ----------------------------------------------------------------------

def test_rollout_posterior_single_step_equals_base_case():
    rssm = make_rssm()
    init = rssm.initial_state(2)
    torch.manual_seed(3)
    actions = torch.randn(2, 1, ACTION_DIM, dtype=torch.float64)
    embeds = torch.randn(2, 1, EMBED_DIM, dtype=torch.float64)
    pairs = rssm.rollout_posterior(init, actions, embeds, torch.Generator().manual_seed(5))
    single = rssm.posterior_step(init, actions[:, 0], embeds[:, 0],
                                 torch.Generator().manual_seed(5))
    assert len(pairs) == 1
    assert torch.equal(pairs[0].state.stoch, single.state.stoch)


def test_rollout_posterior_matches_manual_composition_bitwise():
    rssm = make_rssm()
    init = rssm.initial_state(3)
    torch.manual_seed(4)
    T = 4
    actions = torch.randn(3, T, ACTION_DIM, dtype=torch.float64)
    embeds = torch.randn(3, T, EMBED_DIM, dtype=torch.float64)
    pairs = rssm.rollout_posterior(init, actions, embeds, torch.Generator().manual_seed(9))
    assert len(pairs) == T

    gen = torch.Generator().manual_seed(9)
    state = init
    for t in range(T):
        pair = rssm.posterior_step(state, actions[:, t], embeds[:, t], gen)
        assert torch.equal(pair.state.deter, pairs[t].state.deter)
        assert torch.equal(pair.state.stoch, pairs[t].state.stoch)
        assert torch.equal(pair.prior.mean, pairs[t].prior.mean)
        state = pair.state


def test_rollout_posterior_rejects_length_mismatch():
    rssm = make_rssm()
    init = rssm.initial_state(1)
    with pytest.raises(ValueError):
        rssm.rollout_posterior(init,
                               torch.zeros(1, 3, ACTION_DIM, dtype=torch.float64),
                               torch.zeros(1, 2, EMBED_DIM, dtype=torch.float64))


def test_rollout_imagine_shapes_and_determinism():
    rssm = make_rssm()
    torch.manual_seed(5)
    actor = lambda f: torch.tanh(f[..., :ACTION_DIM])
    init = rssm.initial_state(4)
    traj1 = rssm.rollout_imagine(init, actor, 1, torch.Generator().manual_seed(3))
    assert len(traj1.states) == 2 and traj1.actions.shape == (1, 4, ACTION_DIM)
    traj2 = rssm.rollout_imagine(init, actor, 6, torch.Generator().manual_seed(3))
    traj3 = rssm.rollout_imagine(init, actor, 6, torch.Generator().manual_seed(3))
    assert torch.equal(traj2.features, traj3.features)
    with pytest.raises(ValueError):
        rssm.rollout_imagine(init, actor, 0)


def test_rollout_imagine_replays_prior_steps():
    rssm = make_rssm()
    actor = lambda f: torch.tanh(f[..., :ACTION_DIM])
    init = rssm.initial_state(2)
    traj = rssm.rollout_imagine(init, actor, 5, torch.Generator().manual_seed(11))
    gen = torch.Generator().manual_seed(11)
    state = init.detach()
    for t in range(5):
        action = actor(state.feature)
        assert torch.equal(action, traj.actions[t])
        _, state = rssm.prior_step(state, action, gen)
        assert torch.equal(state.stoch, traj.states[t + 1].stoch)


# ----------------------------------------------------------------------
# KL
# ----------------------------------------------------------------------

def test_kl_hand_values():
    std_normal = gaussian([0.0], [1.0])
    assert float(kl_diag_gaussian(std_normal, std_normal)) == pytest.approx(0.0, abs=1e-12)
    shifted = gaussian([1.0], [1.0])
    assert float(kl_diag_gaussian(shifted, std_normal)) == pytest.approx(0.5, abs=1e-12)
    wide = gaussian([0.0], [2.0])
    expected = (4.0 - 1.0) / 2.0 - math.log(2.0)
    assert float(kl_diag_gaussian(wide, std_normal)) == pytest.approx(expected, abs=1e-9)


def test_kl_identity_and_nonnegativity_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = int(rng.integers(1, 6))
        p = gaussian(rng.normal(size=d), rng.uniform(0.1, 3.0, size=d))
        q = gaussian(rng.normal(size=d), rng.uniform(0.1, 3.0, size=d))
        assert float(kl_diag_gaussian(p, p)) <= 1e-10
        assert float(kl_diag_gaussian(p, q)) >= 0.0


def test_kl_rejects_bad_inputs():
    with pytest.raises(ValueError):
        kl_diag_gaussian(gaussian([0.0], [1.0]), gaussian([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(ValueError):
        DiagGaussian(torch.zeros(2), torch.zeros(3))


def test_kl_monte_carlo_agreement():
    rng = np.random.default_rng(1)
    n = 100_000
    for trial in range(5):
        d = int(rng.integers(1, 5))
        p = gaussian(rng.normal(size=d), rng.uniform(0.2, 2.0, size=d))
        q = gaussian(rng.normal(size=d), rng.uniform(0.2, 2.0, size=d))
        gen = torch.Generator().manual_seed(trial)
        noise = torch.randn(n, d, generator=gen, dtype=torch.float64)
        x = p.mean + p.std * noise
        log_ratio = p.log_prob(x) - q.log_prob(x)
        mc = float(log_ratio.mean())
        se = float(log_ratio.std() / math.sqrt(n))
        assert abs(mc - float(kl_diag_gaussian(p, q))) <= 3 * se


# ----------------------------------------------------------------------
# balanced KL
# ----------------------------------------------------------------------

def test_balanced_kl_alpha_from_ratio():
    # ratio 1 -> equal split: gradient w.r.t. each side carries half the plain-KL gradient
    post = DiagGaussian(torch.tensor([0.3], dtype=torch.float64, requires_grad=True),
                        torch.tensor([1.0], dtype=torch.float64))
    prior_mean = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    prior = DiagGaussian(prior_mean, torch.tensor([1.0], dtype=torch.float64))
    value = balanced_kl(post, prior, ratio=1.0)
    (g_prior,) = torch.autograd.grad(value, prior_mean, retain_graph=True)
    plain = kl_diag_gaussian(DiagGaussian(post.mean.detach(), post.std), prior)
    (g_plain,) = torch.autograd.grad(plain, prior_mean)
    assert torch.allclose(g_prior, 0.5 * g_plain, atol=1e-12)


@pytest.mark.parametrize("ratio", [0.1, 1.0, 10.0])
def test_balanced_kl_value_identity(ratio):
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = int(rng.integers(1, 6))
        p = gaussian(rng.normal(size=d), rng.uniform(0.1, 2.0, size=d))
        q = gaussian(rng.normal(size=d), rng.uniform(0.1, 2.0, size=d))
        assert float(balanced_kl(p, q, ratio)) == pytest.approx(
            float(kl_diag_gaussian(p, q)), abs=1e-8)


def test_balanced_kl_rejects_bad_ratio():
    p = gaussian([0.0], [1.0])
    with pytest.raises(ValueError):
        balanced_kl(p, p, 0.0)


def test_balanced_kl_prior_gradient_scales_with_alpha_fd():
    # finite differences on the prior mean: d(balanced)/d(prior) = alpha * d(KL)/d(prior)
    rng = np.random.default_rng(3)
    d = 3
    post = gaussian(rng.normal(size=d), rng.uniform(0.3, 1.5, size=d))
    prior_mean = torch.tensor(rng.normal(size=d), dtype=torch.float64, requires_grad=True)
    prior_std = torch.tensor(rng.uniform(0.3, 1.5, size=d), dtype=torch.float64)
    for ratio in (0.25, 1.0, 4.0):
        alpha = ratio / (ratio + 1.0)
        value = balanced_kl(post, DiagGaussian(prior_mean, prior_std), ratio)
        (grad,) = torch.autograd.grad(value, prior_mean)
        eps = 1e-6
        for i in range(d):
            delta = torch.zeros(d, dtype=torch.float64)
            delta[i] = eps
            up = float(kl_diag_gaussian(post, DiagGaussian(prior_mean.detach() + delta, prior_std)))
            down = float(kl_diag_gaussian(post, DiagGaussian(prior_mean.detach() - delta, prior_std)))
            fd = (up - down) / (2 * eps)
            assert float(grad[i]) == pytest.approx(alpha * fd, rel=1e-5, abs=1e-8)


# ----------------------------------------------------------------------
# reparameterization
# ----------------------------------------------------------------------

def test_sample_gradient_wrt_mean_is_one():
    d = 4
    mean = torch.zeros(d, dtype=torch.float64, requires_grad=True)
    std = torch.full((d,), 0.7, dtype=torch.float64)
    noise = torch.randn(d, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    dist = DiagGaussian(mean, std)
    sample = dist.sample(noise=noise)
    for i in range(d):
        (grad,) = torch.autograd.grad(sample[i], mean, retain_graph=True)
        eps = 1e-6
        with torch.no_grad():
            up = (mean[i] + eps) + std[i] * noise[i]
            down = (mean[i] - eps) + std[i] * noise[i]
        fd = float((up - down) / (2 * eps))
        assert float(grad[i]) == pytest.approx(1.0, abs=1e-9)
        assert fd == pytest.approx(1.0, abs=1e-6)


def test_stack_and_flatten_helpers():
    rssm = make_rssm()
    init = rssm.initial_state(2)
    torch.manual_seed(6)
    T = 3
    actions = torch.randn(2, T, ACTION_DIM, dtype=torch.float64)
    embeds = torch.randn(2, T, EMBED_DIM, dtype=torch.float64)
    pairs = rssm.rollout_posterior(init, actions, embeds)
    prior, post, features = stack_pairs(pairs)
    assert prior.mean.shape == (2, T, rssm.stoch_dim)
    assert features.shape == (2, T, rssm.feature_dim)
    flat = flatten_states(pairs)
    assert flat.deter.shape == (2 * T, rssm.deter_dim)
