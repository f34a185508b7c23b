"""Actor-critic learning on imagined latent rollouts with truncated
lambda-returns.

The actor outputs a tanh-squashed Gaussian; its loss is the negated mean of
lambda-returns computed along imagined trajectories, with gradients flowing
through the reparameterized actions and the differentiable latent dynamics
while the world model and critic stay frozen. The critic regresses the same
returns with targets detached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import mlp

ACTOR_MIN_STD = 0.1


@dataclass(frozen=True)
class ImaginedRollout:
    """Horizon-H latent rollout: H+1 states, H actions/rewards/discounts."""

    features: torch.Tensor   # [H+1, N, feature_dim]
    actions: torch.Tensor    # [H, N, action_dim]
    rewards: torch.Tensor    # [H, N]
    values: torch.Tensor     # [H+1, N]
    discounts: torch.Tensor  # [H, N]

    def __post_init__(self):
        h = self.actions.shape[0]
        if self.features.shape[0] != h + 1 or self.values.shape[0] != h + 1:
            raise ValueError("features/values must cover horizon + 1 states")
        if self.rewards.shape[0] != h or self.discounts.shape[0] != h:
            raise ValueError("rewards/discounts must cover horizon steps")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


class Actor(nn.Module):
    """Tanh-squashed Gaussian policy head on latent features."""

    def __init__(self, feature_dim: int, action_dim: int, hidden: int = 200,
                 hidden_layers: int = 3):
        super().__init__()
        self.net = mlp(feature_dim, hidden, 2 * action_dim, hidden_layers)
        self.action_dim = action_dim

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, raw_std = self.net(features).chunk(2, dim=-1)
        return mean, F.softplus(raw_std) + ACTOR_MIN_STD

    def act(self, features: torch.Tensor, mode: str = "explore",
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
        mean, std = self(features)
        if mode == "eval":
            return _squash(mean)
        if mode != "explore":
            raise ValueError(f"unknown action mode {mode!r}")
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype,
                            device=mean.device)
        return _squash(mean + std * noise)


def _squash(x: torch.Tensor) -> torch.Tensor:
    # tanh rounds to exactly +-1 for large inputs; keep components strictly
    # inside the open interval.
    bound = 1.0 - 1e-6
    return torch.tanh(x).clamp(-bound, bound)


class Critic(nn.Module):
    def __init__(self, feature_dim: int, hidden: int = 200, hidden_layers: int = 3):
        super().__init__()
        self.net = mlp(feature_dim, hidden, 1, hidden_layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features).squeeze(-1)


def lambda_return(rewards: torch.Tensor, values: torch.Tensor, gamma: float,
                  lam: float) -> torch.Tensor:
    """Backward recursion G_t = r_t + gamma * ((1-lam) * v_{t+1} + lam * G_{t+1})
    with the tail bootstrapped by v_H. rewards: [H, ...], values: [H+1, ...]."""
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(
            f"values must have H+1 entries; got {values.shape[0]} for H={rewards.shape[0]}")
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    horizon = rewards.shape[0]
    out = [None] * horizon
    tail = values[-1]
    for t in reversed(range(horizon)):
        tail = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * tail)
        out[t] = tail
    return torch.stack(out)


def imagine_rollout(world_model, actor: Actor, critic: Critic, init_state,
                    horizon: int, gamma: float,
                    generator: Optional[torch.Generator] = None) -> ImaginedRollout:
    """Produce an ImaginedRollout from detached start states.

    Rewards come from the world model's reward head on the landed states,
    values from the critic on every state; the per-step discount is the
    constant gamma (episodes have fixed length, no termination predictor).
    """
    traj = world_model.rssm.rollout_imagine(
        init_state, lambda f: actor.act(f, "explore", generator), horizon, generator)
    features = traj.features
    rewards = world_model.reward_head(features[1:]).squeeze(-1)
    values = critic(features)
    discounts = torch.full_like(rewards, gamma)
    return ImaginedRollout(features, traj.actions, rewards, values, discounts)


def actor_loss(rollout: ImaginedRollout, gamma: float, lam: float) -> torch.Tensor:
    """Negated mean lambda-return; minimize to push actions toward value."""
    returns = lambda_return(rollout.rewards, rollout.values, gamma, lam)
    return -returns.mean()


def critic_loss(critic: Critic, rollout: ImaginedRollout, gamma: float,
                lam: float) -> torch.Tensor:
    """MSE against frozen lambda-return targets over t < H."""
    with torch.no_grad():
        targets = lambda_return(rollout.rewards, rollout.values, gamma, lam)
    values = critic(rollout.features[:-1].detach())
    return (values - targets).square().mean()
